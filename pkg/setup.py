from setuptools import setup
import os

def getfiles(root):
    for dirpath, _, filenames in os.walk(root):
        for filename in filenames:
            yield os.path.relpath(os.path.join(dirpath, filename))

datafiles  = list(getfiles("synthprobe/experiments"))
datafiles  = ["/".join(x.split("/")[1:]) for x in datafiles]

setup(
    name = "synthprobe",
    description = "Synthetic probe datasets and Lambda layer positional "
                  "encoding experiments",
    license = "MIT",
    version = "0.1.0",
    classifiers = ['Development Status :: 3 - Alpha',
                   'Intended Audience :: Science/Research'],
    packages = ["synthprobe"],
    scripts = ['scripts/synthprobe'],
    package_dir = {"synthprobe": "synthprobe"},
    package_data = {"synthprobe": datafiles},
    python_requires = ">=3.8",
    install_requires = ["setuptools", "numpy>=1.20", "Pillow",
                        "SQLAlchemy>=1.4"],
    extras_require = {"test": ["pytest"]}
)
