"""Desk-scale multi-modal sequence policy pipeline.

Subpackages and modules:

* :mod:`seqpolicy.codec` -- modality value <-> token encoders/decoders
* :mod:`seqpolicy.sequencer` -- episodes -> masked element sequences
* :mod:`seqpolicy.datastore` -- episode files, filtering, dataset mixing
* :mod:`seqpolicy.model` -- embedder, transformer, loss, exact gradients
* :mod:`seqpolicy.trainer` -- pretraining/fine-tuning loops and harnesses
* :mod:`seqpolicy.policy` -- prompted autoregressive control deployment
* :mod:`seqpolicy.envs` -- toy environments with scripted experts
* :mod:`seqpolicy.cli` -- operator command line
"""

__version__ = "0.1.0"
