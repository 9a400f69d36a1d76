import json
import logging
import os

from sqlalchemy import Column, Integer, String, Text, Float

from synthprobe import database

logger = logging.getLogger("synthprobe.models")

class Run(database.Base):
    __tablename__ = "synthprobe_runs"

    id              = Column(Integer, primary_key = True)
    directory       = Column(String(1024), nullable = False, unique = True)
    experiment      = Column(String(250), nullable = False)
    variant         = Column(String(250), nullable = False)
    metric          = Column(String(50), nullable = False)
    train_value     = Column(Float)
    test_value      = Column(Float)
    train_loss      = Column(Float)
    test_loss       = Column(Float)
    report          = Column(Text, nullable = False)

    @property
    def document(self):
        return json.loads(self.report)

    @classmethod
    def lookup(cls, directory, session):
        directory = os.path.abspath(directory)
        run = session.query(Run).filter(Run.directory == directory).first()
        if run is None:
            run = Run(directory = directory)
            logger.debug("Created new run {0}".format(directory))
        else:
            logger.debug("Found existing run {0}".format(directory))
        return run

    @classmethod
    def record(cls, directory, document, url = None):
        """
        Inserts or updates the run stored in directory.
        """
        database.install(url)
        session = database.connect(url)
        try:
            run = cls.lookup(directory, session)
            run.experiment = document["experiment"]
            run.variant = document["variant"]
            train = document["reports"]["train"]["values"]
            test = document["reports"]["test"]["values"]
            run.metric = "iou" if "iou" in test else "masked_accuracy"
            run.train_value = train.get(run.metric)
            run.test_value = test.get(run.metric)
            run.train_loss = train.get("loss")
            run.test_loss = test.get("loss")
            run.report = json.dumps(document, sort_keys = True)
            session.add(run)
            session.commit()
            return run.id
        finally:
            session.close()

    @classmethod
    def all(cls, url = None):
        """
        (directory, document) of every registered run, by directory.
        """
        database.install(url)
        session = database.connect(url)
        try:
            return [(r.directory, r.document) for r in
                    session.query(Run).order_by(Run.directory)]
        finally:
            session.close()
