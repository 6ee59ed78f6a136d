from .models import IoSpec, NeuralModel, NeuralDaeModel, NeuralOdeEModel, load_bundle, make_model, save_bundle
from .dynamics import (
    LossWeights,
    PredictedTrajectory,
    adjoint_backward_dae,
    adjoint_backward_ode_e,
    compute_loss,
    integrate_forward,
    loss_and_grads,
)

__all__ = [
    "IoSpec", "NeuralModel", "NeuralDaeModel", "NeuralOdeEModel", "load_bundle", "make_model", "save_bundle",
    "LossWeights", "PredictedTrajectory", "adjoint_backward_dae", "adjoint_backward_ode_e",
    "compute_loss", "integrate_forward", "loss_and_grads",
]
