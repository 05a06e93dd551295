from dackgr.nn import functional
from dackgr.nn.checkpoint import load_checkpoint, save_checkpoint
from dackgr.nn.layers import LSTM, Embedding, Linear, LSTMCell, Module, lstm_step
from dackgr.nn.optim import Adam, adam_step
from dackgr.nn.tensor import Parameter, ShapeError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Adam",
    "Embedding",
    "LSTM",
    "LSTMCell",
    "Linear",
    "Module",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "functional",
    "grad_enabled",
    "load_checkpoint",
    "lstm_step",
    "no_grad",
    "save_checkpoint",
]
