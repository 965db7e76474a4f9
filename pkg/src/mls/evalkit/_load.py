from pathlib import Path

from ..checkpoint import TrainState, load_checkpoint
from ..scenegen import generate_dataset


def resolve_state(source):
    """Accept a checkpoint directory, a ``TrainState`` or anything with a
    ``.state`` attribute (a ``Trainer``)."""
    if isinstance(source, (str, Path)):
        return load_checkpoint(source)
    if isinstance(source, TrainState):
        return source
    state = getattr(source, "state", None)
    if isinstance(state, TrainState):
        return state
    raise TypeError(f"cannot read a training state from {type(source).__name__}")


def resolve_dataset(state, dataset=None):
    return dataset if dataset is not None else generate_dataset(state.config.scene)
