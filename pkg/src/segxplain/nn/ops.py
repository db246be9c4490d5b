"""Numpy kernels backing the layer implementations.

Convolutions use the im2col/col2im lowering so both directions reduce to a
single matmul per batch; the transposed convolution reuses the same pair with
the roles of input and output exchanged.
"""

import numpy as np


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            cols[:, :, i, j] = x[:, :, i:i_max:stride, j:j_max:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, spatial: tuple, kh: int, kw: int,
           stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; scatter-adds patches back onto (N,C,H,W)."""
    h, w = spatial
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            out[:, :, i:i_max:stride, j:j_max:stride] += cols6[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_forward(x, weight, bias, stride, padding):
    """weight (Cout, Cin, kh, kw); returns (y, cols) with cols kept for backward."""
    cout, cin, kh, kw = weight.shape
    n = x.shape[0]
    oh = conv_output_size(x.shape[2], kh, stride, padding)
    ow = conv_output_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    wmat = weight.reshape(cout, cin * kh * kw)
    y = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    y += bias[None, :, None, None]
    return y, cols


def conv2d_backward(gy, x_shape, cols, weight, stride, padding):
    """Gradients of conv2d_forward w.r.t. input, weight and bias."""
    cout, cin, kh, kw = weight.shape
    n = gy.shape[0]
    gym = gy.reshape(n, cout, -1)
    gbias = gy.sum(axis=(0, 2, 3))
    gweight = np.matmul(gym, cols.transpose(0, 2, 1)).sum(axis=0)
    gweight = gweight.reshape(weight.shape)
    wmat = weight.reshape(cout, cin * kh * kw)
    gcols = np.matmul(wmat.T, gym)
    gx = col2im(gcols, x_shape[2:], kh, kw, stride, padding)
    return gx, gweight, gbias


def conv2d_transpose_forward(x, weight, bias, stride, padding):
    """weight (Cin, Cout, kh, kw); output spatial = (H-1)*stride + k - 2*padding."""
    cin, cout, kh, kw = weight.shape
    n, _, h, w = x.shape
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (w - 1) * stride + kw - 2 * padding
    xm = x.reshape(n, cin, h * w)
    wmat = weight.reshape(cin, cout * kh * kw)
    cols = np.matmul(wmat.T, xm)
    y = col2im(cols, (oh, ow), kh, kw, stride, padding)
    y += bias[None, :, None, None]
    return y


def conv2d_transpose_backward(gy, x, weight, stride, padding):
    cin, cout, kh, kw = weight.shape
    n, _, h, w = x.shape
    gcols = im2col(gy, kh, kw, stride, padding)  # (N, Cout*kh*kw, H*W)
    wmat = weight.reshape(cin, cout * kh * kw)
    gx = np.matmul(wmat, gcols).reshape(x.shape)
    xm = x.reshape(n, cin, h * w)
    gweight = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gbias = gy.sum(axis=(0, 2, 3))
    return gx, gweight, gbias


def maxpool_forward(x, window):
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    xr = x.reshape(n, c, oh, window, ow, window)
    patches = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    idx = patches.argmax(axis=-1)  # first maximum wins on ties
    y = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(gy, idx, x_shape, window):
    n, c, h, w = x_shape
    oh, ow = h // window, w // window
    gpatches = np.zeros((n, c, oh, ow, window * window), dtype=gy.dtype)
    np.put_along_axis(gpatches, idx[..., None], gy[..., None], axis=-1)
    gx = gpatches.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
    return gx.reshape(x_shape)


def softmax(x, axis=1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
