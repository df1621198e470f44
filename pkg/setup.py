""" setup.py created according to https://packaging.python.org/tutorials/packaging-projects """

import setuptools  # type:ignore

setuptools.setup(
    name="penseg",
    version="0.1.0",
    description="Learned projection of z-stacks and multi-channel segmentation of overlapping cells.",
    packages=setuptools.find_packages(exclude=["test", "tests", "examples"]),
    classifiers=[  # see https://pypi.org/classifiers/
        "Programming Language :: Python :: 3.8",
        "Operating System :: OS Independent",
        "Development Status :: 2 - Pre-Alpha",
        "Natural Language :: English",
        "Typing :: Typed",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    package_data={
        "": [],
        "penseg": ["py.typed"],
    },
    include_package_data=True,
    install_requires=[
        "networkx",
        "numpy",
        "scipy",
        "scikit-image",
        "tifffile",
        "torch",
        "matplotlib",
        "PyYAML",
    ],
    entry_points={"console_scripts": ["penseg=penseg.harness.cli:main"]},
)
