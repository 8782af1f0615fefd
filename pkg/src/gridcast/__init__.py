"""Occupancy-grid sequence prediction with attention-augmented ConvLSTMs.

Subpackages:

* ``tensor``    -- numpy-backed tensors with taped reverse-mode autodiff
* ``attention`` -- multi-head spatial and temporal attention operators
* ``cells``     -- recurrent cells (ConvLSTM family, causal LSTM, GHU)
* ``prednet``   -- predictive-coding stacks and a causal-LSTM baseline
* ``dst``       -- evidential occupancy grids and synthetic LiDAR worlds
* ``metrics``   -- MSE, image similarity, moving-object mass retention
* ``training``  -- L1 sequence loss, Adam, the training loop
* ``cli``       -- command-line entry points
"""

__version__ = "0.1.0"
