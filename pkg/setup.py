from setuptools import find_packages, setup


with open("README.md", "r") as f:
    long_description = f.read()


setup(
    name="hivopt",
    version="0.1.0",
    description="Budget-constrained optimal allocation of HIV prevention and treatment by pseudospectral collocation",
    packages=find_packages(exclude=["tests"]),
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="MIT",
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3.9",
        "Operating System :: OS Independent",
    ],
    install_requires=[
        "jax",
        "jaxopt >= 0.6",
        "typing-extensions >= 4.5.0",
        "pandas >= 1.5.3",
        "flax >= 0.6.10",
        "numpy",
        "scipy >= 1.8",
        "pyyaml >= 6.0",
        "quadprog >= 0.1.11",
    ],
    extras_require={
        "test": ["pytest >= 7", "hypothesis >= 6"],
    },
    entry_points={
        "console_scripts": ["hivopt=hivopt.scenario_cli:main"],
    },
    python_requires=">=3.9",
)
