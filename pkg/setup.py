"""
Setup configuration for ltpdpm.
"""

from setuptools import setup, find_packages
from pathlib import Path

this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text(encoding="utf-8")

setup(
    name="ltpdpm",
    version="0.1.0",
    description="Low-rank Student-t process mixtures for gridded weekly climate extremes",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["apps"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Atmospheric Science",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.11",
    install_requires=[
        "numpy>=1.25.0",
        "scipy>=1.11.0",
        "pandas>=2.0.0",
        "pydantic>=2.0.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "black>=22.0.0",
            "flake8>=4.0.0",
            "mypy>=0.950",
            "isort>=5.10.0",
            "pre-commit>=2.15.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "ltpdpm=ltpdpm.cli:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
    keywords=[
        "bayesian",
        "spatial statistics",
        "student-t process",
        "dirichlet process mixture",
        "climate extremes",
        "mcmc",
    ],
)
