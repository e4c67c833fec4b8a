"""Exception types shared across the pipeline."""


class RelightError(Exception):
    """Base class; carries a short machine-readable code for the CLI."""

    code = "generic"


# --- environment map ---

class MalformedHeader(RelightError):
    code = "malformed_header"


class AspectViolation(RelightError):
    code = "aspect_violation"


class NonNegativeViolation(RelightError):
    code = "non_negative_violation"


class TruncatedPayload(RelightError):
    code = "truncated_payload"


class NonUnitDirection(RelightError):
    code = "non_unit_direction"


class NonPositiveClip(RelightError):
    code = "non_positive_clip"


class InvalidSpec(RelightError):
    code = "invalid_spec"


# --- renderer ---

class DegenerateScene(RelightError):
    code = "degenerate_scene"


# --- dataset ---

class IoFailure(RelightError):
    code = "io_failure"


class EmptySplit(RelightError):
    code = "empty_split"


class EmptyRealSet(RelightError):
    code = "empty_real_set"


# --- diffusion / network ---

class InvalidScheduleParams(RelightError):
    code = "invalid_schedule_params"


class StepOutOfRange(RelightError):
    code = "step_out_of_range"


class ShapeMismatch(RelightError):
    code = "shape_mismatch"


class InvalidConfig(RelightError):
    code = "invalid_config"


class LabelOutOfRange(RelightError):
    code = "label_out_of_range"


# --- trainer ---

class NonFiniteLoss(RelightError):
    code = "non_finite_loss"


class CorruptCheckpoint(RelightError):
    code = "corrupt_checkpoint"


class VersionMismatch(RelightError):
    code = "version_mismatch"


# --- sampler ---

class StepOrderViolation(RelightError):
    code = "step_order_violation"


class EmptyList(RelightError):
    code = "empty_list"


# --- metrics ---

class EmptyMask(RelightError):
    code = "empty_mask"


class TooSmall(RelightError):
    code = "too_small"
