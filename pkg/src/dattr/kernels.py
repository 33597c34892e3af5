"""Backend selection for the MLP hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
NumPy implementation in ``_pykernels`` takes over. ``DATTR_KERNEL=python``
forces the fallback and ``DATTR_KERNEL=c`` makes a missing extension an error.
"""

import importlib
import os

from dattr import _pykernels

_FUNCS = ("forward", "loss_grad", "per_example_losses", "per_example_grads", "hvp",
          "sgd_update", "train_step", "train_loop")


def load_backend(name: str):
    """Return the kernel module for ``"c"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "c":
        return importlib.import_module("dattr._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("c")
    except ImportError:
        pass
    else:
        names.insert(0, "c")
    return names


def _select():
    choice = os.environ.get("DATTR_KERNEL", "auto").lower()
    if choice in ("python", "py"):
        return _pykernels
    try:
        return load_backend("c")
    except ImportError:
        if choice == "c":
            raise
        return _pykernels


_impl = _select()
BACKEND = _impl.BACKEND

forward = _impl.forward
loss_grad = _impl.loss_grad
per_example_losses = _impl.per_example_losses
per_example_grads = _impl.per_example_grads
hvp = _impl.hvp
sgd_update = _impl.sgd_update
train_step = _impl.train_step
train_loop = _impl.train_loop
