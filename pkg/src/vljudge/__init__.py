"""Harness for evaluating vision-language models as judges of chart tasks."""

__version__ = "0.1.0"
