"""
Layer kernels for the network substrate.

Each layer knows its parameter and buffer shapes, how to initialise them,
and how to run an exact forward and backward pass over 64-bit arrays.
Layers hold no state of their own: parameters and buffers are passed in
and gradients are handed back, so a layer object can be shared freely.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np

# Batch normalisation constants
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Layer:
    """
    Base class for all layers.

    Subclasses override the shape hooks and the forward/backward kernels.
    """

    kind = "layer"

    def __init__(self, name: str, in_shape: Tuple[int, ...], out_shape: Tuple[int, ...]):
        self.name = name
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Return (qualified name, shape) for each trainable parameter in layout order."""
        return []

    def buffer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Return (qualified name, shape) for each non-trainable buffer in layout order."""
        return []

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def init_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(
        self,
        x: np.ndarray,
        params: Dict[str, np.ndarray],
        buffers: Dict[str, np.ndarray],
        train: bool
    ) -> Tuple[np.ndarray, object, Optional[Dict[str, np.ndarray]]]:
        """
        Run the layer.

        Returns:
            (output, cache for backward, batch statistics or None)
        """
        raise NotImplementedError

    def backward(
        self,
        grad_out: np.ndarray,
        cache: object,
        params: Dict[str, np.ndarray]
    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """
        Propagate the upstream gradient.

        Returns:
            (gradient w.r.t. the layer input, gradients keyed by parameter name)
        """
        raise NotImplementedError


class Conv2D(Layer):
    """
    Square convolution with stride 1 and zero "same" padding.

    Weights are laid out (out_channels, in_channels, k, k).
    """

    kind = "conv"

    def __init__(self, name, in_shape, out_shape, kernel: int = 3):
        super().__init__(name, in_shape, out_shape)
        self.kernel = kernel
        self.in_channels = in_shape[0]
        self.out_channels = out_shape[0]

    def param_shapes(self):
        k = self.kernel
        return [
            (f"{self.name}.weight", (self.out_channels, self.in_channels, k, k)),
            (f"{self.name}.bias", (self.out_channels,)),
        ]

    def init_params(self, rng):
        k = self.kernel
        fan_in = self.in_channels * k * k
        std = np.sqrt(2.0 / fan_in)
        return {
            f"{self.name}.weight": rng.normal(0.0, std, size=(self.out_channels, self.in_channels, k, k)),
            f"{self.name}.bias": np.zeros(self.out_channels),
        }

    def forward(self, x, params, buffers, train):
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        k = self.kernel
        pad = k // 2
        n, _, h, wd = x.shape

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, self.out_channels, h, wd))
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + h, dj:dj + wd]
                out += np.einsum("nchw,oc->nohw", patch, w[:, :, di, dj])
        out += b[None, :, None, None]
        return out, xp, None

    def backward(self, grad_out, cache, params):
        xp = cache
        w = params[f"{self.name}.weight"]
        k = self.kernel
        pad = k // 2
        _, _, h, wd = grad_out.shape

        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + h, dj:dj + wd]
                dw[:, :, di, dj] = np.einsum("nohw,nchw->oc", grad_out, patch)
                dxp[:, :, di:di + h, dj:dj + wd] += np.einsum("nohw,oc->nchw", grad_out, w[:, :, di, dj])
        db = grad_out.sum(axis=(0, 2, 3))
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        return dx, {f"{self.name}.weight": dw, f"{self.name}.bias": db}


class BatchNorm(Layer):
    """
    Batch normalisation over channels (4-D input) or features (2-D input).

    Training mode normalises with the biased batch variance and reports the
    batch statistics; inference mode uses the running buffers.
    """

    kind = "bn"

    def __init__(self, name, in_shape, out_shape):
        super().__init__(name, in_shape, out_shape)
        self.channels = in_shape[0]

    def _axes(self, x: np.ndarray) -> Tuple[int, ...]:
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _broadcast(self, v: np.ndarray, ndim: int) -> np.ndarray:
        return v[None, :, None, None] if ndim == 4 else v[None, :]

    def param_shapes(self):
        return [
            (f"{self.name}.gamma", (self.channels,)),
            (f"{self.name}.beta", (self.channels,)),
        ]

    def buffer_shapes(self):
        return [
            (f"{self.name}.running_mean", (self.channels,)),
            (f"{self.name}.running_var", (self.channels,)),
        ]

    def init_params(self, rng):
        return {
            f"{self.name}.gamma": np.ones(self.channels),
            f"{self.name}.beta": np.zeros(self.channels),
        }

    def init_buffers(self):
        return {
            f"{self.name}.running_mean": np.zeros(self.channels),
            f"{self.name}.running_var": np.ones(self.channels),
        }

    def forward(self, x, params, buffers, train):
        gamma = self._broadcast(params[f"{self.name}.gamma"], x.ndim)
        beta = self._broadcast(params[f"{self.name}.beta"], x.ndim)

        if not train:
            mean = self._broadcast(buffers[f"{self.name}.running_mean"], x.ndim)
            var = self._broadcast(buffers[f"{self.name}.running_var"], x.ndim)
            xhat = (x - mean) / np.sqrt(var + BN_EPS)
            return gamma * xhat + beta, None, None

        axes = self._axes(x)
        count = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(self._broadcast(var, x.ndim) + BN_EPS)
        xhat = (x - self._broadcast(mean, x.ndim)) * inv_std
        stats = {"mean": mean, "var": var, "count": count}
        return gamma * xhat + beta, (xhat, inv_std, axes, count), stats

    def backward(self, grad_out, cache, params):
        if cache is None:
            raise ValueError(f"{self.name}: backward requires a train-mode forward pass")
        xhat, inv_std, axes, count = cache
        gamma = self._broadcast(params[f"{self.name}.gamma"], grad_out.ndim)

        dgamma = (grad_out * xhat).sum(axis=axes)
        dbeta = grad_out.sum(axis=axes)

        dxhat = grad_out * gamma
        sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = inv_std / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}

    def update_running(
        self,
        buffers: Dict[str, np.ndarray],
        stats: Dict[str, np.ndarray],
        momentum: float = BN_MOMENTUM
    ) -> Dict[str, np.ndarray]:
        """
        Momentum update of the running statistics from one batch.

        The running variance tracks the unbiased batch variance.
        """
        count = stats["count"]
        unbiased = stats["var"] * count / (count - 1)
        mean_key = f"{self.name}.running_mean"
        var_key = f"{self.name}.running_var"
        return {
            mean_key: (1.0 - momentum) * buffers[mean_key] + momentum * stats["mean"],
            var_key: (1.0 - momentum) * buffers[var_key] + momentum * unbiased,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params, buffers, train):
        return np.maximum(x, 0.0), x > 0, None

    def backward(self, grad_out, cache, params):
        return grad_out * cache, {}


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""

    kind = "maxpool"

    def _windows(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return win.reshape(n, c, h // 2, w // 2, 4)

    def forward(self, x, params, buffers, train):
        win = self._windows(x)
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape), None

    def backward(self, grad_out, cache, params):
        idx, shape = cache
        n, c, h, w = shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, idx[..., None], grad_out[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, params, buffers, train):
        return x.reshape(x.shape[0], -1), x.shape, None

    def backward(self, grad_out, cache, params):
        return grad_out.reshape(cache), {}


class Dense(Layer):
    """Fully connected layer; weight is laid out (in_features, out_features)."""

    kind = "dense"

    def __init__(self, name, in_shape, out_shape):
        super().__init__(name, in_shape, out_shape)
        self.in_features = in_shape[0]
        self.out_features = out_shape[0]

    def param_shapes(self):
        return [
            (f"{self.name}.weight", (self.in_features, self.out_features)),
            (f"{self.name}.bias", (self.out_features,)),
        ]

    def init_params(self, rng):
        std = np.sqrt(2.0 / self.in_features)
        return {
            f"{self.name}.weight": rng.normal(0.0, std, size=(self.in_features, self.out_features)),
            f"{self.name}.bias": np.zeros(self.out_features),
        }

    def forward(self, x, params, buffers, train):
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        return x @ w + b, x, None

    def backward(self, grad_out, cache, params):
        x = cache
        w = params[f"{self.name}.weight"]
        grads = {
            f"{self.name}.weight": x.T @ grad_out,
            f"{self.name}.bias": grad_out.sum(axis=0),
        }
        return grad_out @ w.T, grads


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, BatchNorm, ReLU, MaxPool2, Flatten, Dense)
}
