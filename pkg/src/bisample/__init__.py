"""Bisample metric learning at desk scale.

A small embedding encoder trained in three stages (classification
pretraining, verification transfer, selective-prototype classification
against the full class inventory), with a host-memory prototype store,
dominant-queue negative mining, synthetic bisample data generation, and
open-set verification evaluation.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    ablations,
    classification,
    datagen,
    domqueue,
    encoder,
    errors,
    evaluation,
    numkit,
    pipeline,
    prototypes,
    rngkit,
    verification,
)
