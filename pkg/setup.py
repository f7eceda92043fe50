import re

from setuptools import setup

# Version without importing the package.
with open("asr/__init__.py") as f:
    __version__ = re.search(r"^__version__ = \"([^\"]+)\"", f.read(), re.M).group(1)

with open("requirements.txt") as f:
    requirements = f.read().splitlines()

setup(
    name="asr",
    version=__version__,
    description="Neurosymbolic ellipse autoencoder and decision-tree classification of histopathology patches.",
    packages=["asr", "asr.commands"],
    package_data={"asr": ["data/*"]},
    entry_points={"console_scripts": ["asr=asr.cli:main"]},
    install_requires=requirements,
    extras_require={"dev": ["pytest"]},
    keywords="autoencoder renderer decision-tree histopathology",
    classifiers=["Programming Language :: Python :: 3.9"],
)
