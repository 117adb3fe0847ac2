from .chain_model import (
    ChainModel, ImuMount, JointSpec, JointState, example_leg,
)
from .calib import MountCalibration, calibrate
from .cli_io import load_config, parse_log, run_command
from .errors import JointImuError

__version__ = '0.1.0'
