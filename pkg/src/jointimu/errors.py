# Copyright 2022 Softpoint Consultores SL. All Rights Reserved.
#
# Licensed under MIT License (the "License");
# you may not use this file except in compliance with the License.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================

"""Exceptions and warnings raised by jointimu."""


class JointImuError(Exception):
    """Base class for every error raised by the package."""


class NonFiniteInput(JointImuError, ValueError):
    """An array argument contains NaN or Inf."""


class RankDeficient(JointImuError, ValueError):
    """A rotation fit has fewer than two excited directions."""


class NearSingular(JointImuError, ValueError):
    """The stacked two-accelerometer system has rank below three."""


class LockedJointViolation(JointImuError, ValueError):
    """Joint positions moved during a supposedly locked calibration log."""

    def __init__(self, max_motion, threshold):
        self.max_motion = float(max_motion)
        self.threshold = float(threshold)
        super().__init__(
            f'joints moved {self.max_motion:.3e} rad during calibration '
            f'(limit {self.threshold:.1e} rad)'
        )


class SignalTooShort(JointImuError, ValueError):
    """Signal shorter than the zero-delay filter warm-up requires."""


class InvalidCutoff(JointImuError, ValueError):
    """Filter cutoff outside the open interval (0, f_s/2)."""


class CovarianceDivergence(JointImuError, ArithmeticError):
    """A filter variance exceeded its ceiling or became non-finite."""


class FilterStepError(JointImuError):
    """Wraps an error raised at a given timestep of a filtered stream."""

    def __init__(self, step, error):
        self.step = int(step)
        self.error = error
        super().__init__(f'step {self.step}: {type(error).__name__}: {error}')


class NoStableGain(JointImuError, ValueError):
    """Even the lower bound of a gain search is unstable."""


class ConfigError(JointImuError, ValueError):
    """Experiment configuration failed validation."""


class LogFormatError(JointImuError, ValueError):
    """Base class for log-file errors."""


class FormatVersionMismatch(LogFormatError):
    pass


class MalformedLine(LogFormatError):

    def __init__(self, line_no, reason):
        self.line_no = int(line_no)
        self.reason = reason
        super().__init__(f'line {self.line_no}: {reason}')


class NonMonotoneTimestamp(LogFormatError):

    def __init__(self, line_no):
        self.line_no = int(line_no)
        super().__init__(f'line {self.line_no}: timestamp decreases')


class IllConditionedWarning(RuntimeWarning):
    """A least-squares system is poorly conditioned; results are kept."""
