"""
Use to connect to the run registry.

>>> from synthprobe.database import connect, install
>>> install("sqlite:///runs.db")
>>> session = connect("sqlite:///runs.db")
>>> session.query(Run).all()
>>> session.commit()

The URL defaults to SYNTHPROBE_DATABASE.
"""

import logging

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, declarative_base

from synthprobe import config
from synthprobe.config import ConfigError

logger = logging.getLogger("synthprobe.database")

Base = declarative_base()

engines = {}

def engine(url = None):
    url = url or config.database
    if not url:
        raise ConfigError("No run registry configured; pass --database or "
                          "set SYNTHPROBE_DATABASE")
    if url not in engines:
        engines[url] = create_engine(url, pool_recycle = 3600)
        logger.debug("Opened registry {0}".format(url))
    return engines[url]

def connect(url = None):
    """
    Generates a database session.
    """
    return sessionmaker(bind = engine(url))()

def install(url = None):
    """
    Installs the registry, but does not drop existing tables.
    """
    Base.metadata.create_all(engine(url))
