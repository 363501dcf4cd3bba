"""Full-body motion tracking from three VR trackers (head + two hands).

The package reconstructs and physically simulates a full-body avatar from
the positions/orientations of a head-mounted display and two hand
controllers.  It contains a recurrent pose predictor, a PD-actuated
articulated-body simulator, a PPO-trained tracking policy, the multi-rate
runtime loop tying them together, and the data/evaluation tooling needed
to train and validate the stack on recorded or synthetic motion clips.
"""

__version__ = "0.1.0"
