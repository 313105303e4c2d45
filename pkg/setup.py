"""Setup script for the elattn package."""

from setuptools import find_packages, setup

setup(
    name="elattn",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy",
        "pyyaml",
    ],
    python_requires=">=3.8",
    description="A desk-scale transformer inference engine with EL-attention and cost models",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    entry_points={
        "console_scripts": [
            "elattn=elattn.cli:main",
        ],
    },
)
