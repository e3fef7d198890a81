"""Y86++ simulator, PAE paging model, assembler and MinVisor cutpoint verifier."""

__version__ = "0.1.0"
