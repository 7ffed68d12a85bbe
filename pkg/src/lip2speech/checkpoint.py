"""Module checkpoints on top of the tensor container."""
import numpy as np
import torch

from .container import read_container, write_container


class CheckpointError(ValueError):
    pass


def state_arrays(module, prefix="param/"):
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, tensors, prefix="param/"):
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def save_checkpoint(path, module, meta, extra=None):
    tensors = state_arrays(module)
    if extra:
        tensors.update(extra)
    return write_container(path, tensors, meta)


def read_checkpoint(path, kind):
    tensors, meta = read_container(path)
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return tensors, meta


def check_vocab(meta, vocab, path):
    if vocab is not None and meta.get("vocab_hash") != vocab.hash():
        raise CheckpointError(f"{path}: vocabulary hash does not match the corpus vocabulary")


def params_equal(a, b):
    """True when two modules hold bit-identical parameters."""
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(
        np.array_equal(sa[k].cpu().numpy(), sb[k].cpu().numpy()) for k in sa
    )
