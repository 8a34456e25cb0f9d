import pathlib
from setuptools import find_packages, setup
from depth_forge.__version__ import __version__


# The directory containing this file
HERE = pathlib.Path(__file__).parent

# The text of the README file
README = (HERE / "README.md").read_text()

setup(
    name="depth_forge",
    version=__version__,
    description="Metric depth question answering for vision language models: data prep, evaluation and point clouds.",
    long_description=README,
    long_description_content_type="text/markdown",
    include_package_data=True,
    package_data={"depth_forge": ["resources/*.json"]},
    license="MIT",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.10",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    packages=find_packages(
        exclude=(
            "examples",
            "tests",
            "requirements",
        )
    ),
    install_requires=[
        "numpy",
        "pydantic>=2",
        "python-dotenv",
        "PyYAML",
        "aiohttp",
        "tqdm",
        "coloredlogs",
        "Pillow",
        "plyfile",
    ],
    extras_require={
        "test": ["hypothesis", "scipy"],
    },
    entry_points={
        "console_scripts": ["forge=depth_forge.cli:main"],
    },
    python_requires=">=3.10"
)
