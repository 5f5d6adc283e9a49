"""Speaker- and deficiency-conditioned adapters for a miniature CTC speech recogniser.

Submodules: ``diffcore`` (autodiff), ``ctc``, ``backbone``, ``adapters``,
``corpus``, ``classifier``, ``pipelines``, ``scoring``, ``checkpoint``, ``cli``.
"""

__version__ = "0.1.0"
