from enum import Enum


class Segment(Enum):
    LOS = 'LoS'
    NLOS = 'NLoS'


LOS = Segment.LOS
NLOS = Segment.NLOS


class PlannerMode(Enum):
    OPTIMIZED = 'optimized'
    RANDOM_RECTANGLE = 'random-rectangle'
    STATIC_BS_ONLY = 'static-bs-only'


class EstimatorMode(Enum):
    FULL = 'full'
    RSS_ONLY = 'rss-only'


class Denominator(Enum):
    # total link count N*K, or the responsibility mass of textbook EM
    TOTAL = 'total'
    RESPONSIBILITY = 'responsibility'


# Link families in the pooled order used by EM, the initializers and the graph builder
LINK_FAMILIES = ('uav_ue', 'bs_uav', 'bs_ue')


def _validate(enum_cls, value, what):
    if isinstance(value, enum_cls):
        return value
    valid = {member.value for member in enum_cls}
    if value not in valid:
        valid_values = ", ".join(sorted(valid))
        raise ValueError("Invalid {}: '{}'. Must be one of the following: {}".format(what, value, valid_values))
    return enum_cls(value)


def validate_planner_mode(mode):
    '''
    Validates a planner mode

    Args:
        mode (str or PlannerMode): 'optimized', 'random-rectangle' or 'static-bs-only'.

    Returns:
        PlannerMode: the parsed mode.

    Raises:
        ValueError: If an invalid mode is provided.
    '''
    return _validate(PlannerMode, mode, "planner mode")


def validate_estimator_mode(mode):
    return _validate(EstimatorMode, mode, "estimator mode")


def validate_denominator(value):
    return _validate(Denominator, value, "EM denominator")
