"""
Tensor and tape-based reverse-mode differentiation.

Every differentiable op records a Node holding its inputs and a closure over
the values it saved for the backward pass. backward() walks the recorded graph
in reverse topological order, populates .grad on every reachable tensor that
requires it, then frees the tape.
"""

# python
import logging
import threading
import contextlib
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

# pymm2d3d
from ..errors import UsageError


logger = logging.getLogger('pymm2d3d.autodiff')


PRECISIONS = {
    'float32': np.float32,
    'float64': np.float64,
}


class _AutodiffState(threading.local):
    """
    Grad mode and storage precision. Thread-local so that batch assembly
    threads never record graph nodes for the training thread.
    """

    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True


_state = _AutodiffState()


def default_dtype():
    """
    Return the numpy dtype used for new tensors.
    """
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def precision(name: str):
    """
    Switch tensor storage precision, e.g. 'float64' for gradient checking.
    """
    if name not in PRECISIONS:
        raise UsageError(f'Unknown precision <{name}>, use one of {list(PRECISIONS)}')
    previous = _state.dtype
    _state.dtype = PRECISIONS[name]
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """
    Disable graph recording, used by evaluation and pseudo-labelling.
    """
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node():
    """
    One op record on the tape.
    """
    __slots__ = ('op', 'inputs', 'backward_fn', 'released')

    def __init__(self,
                 op: str,
                 inputs: Tuple['Tensor', ...],
                 backward_fn: Callable) -> None:
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False

    def release(self) -> None:
        """
        Drop the saved values held by the backward closure.
        """
        self.backward_fn = None
        self.released = True

    def __repr__(self) -> str:
        return f'<Node: {self.op}>'


class Tensor():
    """
    Dense n-dimensional array with optional gradient tracking.
    """

    def __init__(self,
                 data,
                 requires_grad: bool = False,
                 dtype=None) -> None:
        self.data = np.ascontiguousarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Optional[Node]:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        """
        Return a constant copy cut from the graph.
        """
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        from .ops import add
        return add(self, other)

    def __sub__(self, other: 'Tensor') -> 'Tensor':
        from .ops import add, scale
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> 'Tensor':
        from .ops import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __neg__(self) -> 'Tensor':
        from .ops import scale
        return scale(self, -1.0)

    def __repr__(self) -> str:
        op = self._node.op if self._node is not None else 'leaf'
        return f'<Tensor shape={self.shape} dtype={self.data.dtype} op={op} requires_grad={self.requires_grad}>'


def record(op: str,
           data: np.ndarray,
           inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    Wrap an op result and put it on the tape.

    backward_fn maps the output gradient to one gradient (or None) per input.
    """
    requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


class ComputationGraph():
    """
    Topologically ordered op records reachable from one root tensor.
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.order: List[Tensor] = []
        self.leaves: List[Tensor] = []
        self._build()

    def _build(self) -> None:
        visited = set()
        leaf_ids = set()
        # iterative post-order DFS, inputs before outputs
        stack = [(self.root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                self.order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            if tensor._node is None:
                if tensor.requires_grad and id(tensor) not in leaf_ids:
                    leaf_ids.add(id(tensor))
                    self.leaves.append(tensor)
                continue
            stack.append((tensor, True))
            for inp in reversed(tensor._node.inputs):
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))

    @property
    def nodes(self) -> List[Node]:
        return [t._node for t in self.order]

    def __len__(self) -> int:
        return len(self.order)


def backward(root: Tensor) -> None:
    """
    Reverse-mode pass from a scalar.

    Leaf gradients accumulate across calls (the trainer clears them once per
    optimizer step); intermediate gradients are overwritten.
    """
    if root.size != 1:
        raise UsageError(f'backward() needs a scalar, got shape {root.shape}')
    if not root.requires_grad:
        raise UsageError('backward() on a tensor that does not require grad')
    if root._node is not None and root._node.released:
        raise UsageError('The graph of this tensor was already freed by a previous backward(), run the forward pass again')

    graph = ComputationGraph(root)
    grads = {id(root): np.ones_like(root.data)}

    for tensor in reversed(graph.order):
        node = tensor._node
        if node.released:
            raise UsageError(f'Graph node <{node.op}> was already freed by a previous backward()')
        grad = grads.pop(id(tensor), None)
        if grad is None:
            node.release()
            continue
        tensor.grad = grad
        input_grads = node.backward_fn(grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
        node.release()

    for leaf in graph.leaves:
        g = grads.pop(id(leaf), None)
        if g is None:
            continue
        g = g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    logger.debug("[Autodiff] Backward through %s nodes, %s leaves", len(graph), len(graph.leaves))
