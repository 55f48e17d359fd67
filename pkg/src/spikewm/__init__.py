"""Spiking neural networks with multi-compartment neurons and a spiking world model."""

from spikewm.neuron import (LIFCellState, MCNCellState, MCNWeights, NeuronParams, dendrite_step, gate,
                            lif_step, mcn_step, surrogate_grad)

__all__ = ["NeuronParams", "MCNWeights", "MCNCellState", "LIFCellState", "lif_step", "dendrite_step",
           "gate", "mcn_step", "surrogate_grad"]
__version__ = "0.1.0"
