from setuptools import setup, find_packages

setup(
    name="fusion_lab",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "numpy>=1.26.0",
        "threadpoolctl>=3.2.0",
        "pydantic>=2.5.0",
        "typing_extensions>=4.8.0",
        "python-dotenv>=0.21.0",
        "pandas>=2.0.0",
        "typer>=0.9.0",
        "rich>=13.0.0",
        "reportlab>=3.6.0",
        "markdown>=3.5.0",
        "sacrebleu>=2.3.0",
    ],
    entry_points={
        "console_scripts": [
            "fusion_lab=fusion_lab.cli.main:app",
        ],
    },
)
