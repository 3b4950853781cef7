"""Orbits and augmentation distributions over inputs.

Three families of p(x_a|x) are provided: finite orbits (coordinate swaps,
rotation grids, explicit map lists), uniform affine transformations with
learnable bounds, and a simplified elastic deformation with a learnable
amplitude.  Image transforms go through a differentiable bilinear warp so
that gradients reach the bound parameters by reparameterisation.

Images use normalized coordinates: the grid [-1, 1]^2 with the origin at
the image centre, pixel i of an axis of length n at -1 + 2 i/(n-1).
Locations outside the grid read as zero.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Parameter
from .numcore import RngStream, draw, draw_array


class UnsupportedShape(Exception):
    """The orbit or sampler does not apply to inputs of this shape."""


class SampleCountExceedsOrbit(Exception):
    """Asked for more without-replacement samples than the orbit holds."""


@dataclass(frozen=True, eq=False)
class Image:
    """A single grayscale image, row-major, intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise UnsupportedShape(f"expected 2-d pixel array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class OrbitSpec:
    """A finite group orbit: which maps generate 𝒜(x) and how many there are."""

    kind: str
    P: int
    maps: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in ("coordinate_swap", "rotation_grid", "explicit"):
            raise ValueError(f"unknown orbit kind {self.kind!r}")
        if self.P < 1:
            raise ValueError("orbit size must be at least 1")

    @staticmethod
    def coordinate_swap():
        return OrbitSpec("coordinate_swap", 2)

    @staticmethod
    def rotation_grid(P):
        return OrbitSpec("rotation_grid", int(P))

    @staticmethod
    def explicit(maps):
        """Orbit from explicit callables; the first map must be the identity."""
        maps = tuple(maps)
        if not maps:
            raise ValueError("explicit orbit needs at least one map")
        return OrbitSpec("explicit", len(maps), maps)


class AffineBounds:
    """Learnable box bounds for uniform affine augmentation.

    The box over coefficients is parameterised as centre +- softplus of an
    unconstrained halfwidth, so phi_min <= phi_max holds structurally.  In
    ``rotation_only`` mode the same machinery runs on a single scalar, the
    rotation angle in radians, and the centre defaults to frozen at zero so
    the range stays symmetric while its halfwidth alpha is learned.
    """

    def __init__(self, centre=0.0, halfwidth=0.1, mode="full_affine",
                 name="affine", trainable_centre=None, trainable_halfwidth=True):
        if mode not in ("full_affine", "rotation_only"):
            raise ValueError(f"unknown affine mode {mode!r}")
        self.mode = mode
        self.dim = 6 if mode == "full_affine" else 1
        if trainable_centre is None:
            trainable_centre = mode == "full_affine"
        centre = np.broadcast_to(np.asarray(centre, dtype=float), (self.dim,)).copy()
        halfwidth = np.broadcast_to(np.asarray(halfwidth, dtype=float), (self.dim,)).copy()
        self.centre = Parameter(f"{name}/centre", centre, "identity",
                                trainable=trainable_centre)
        self.halfwidth = Parameter(f"{name}/halfwidth", halfwidth, "softplus",
                                   trainable=trainable_halfwidth)

    @property
    def alpha(self):
        """The current angle bound (rotation_only mode)."""
        return float(self.halfwidth.value()[0])

    def phi_min(self):
        return self.centre.value() - self.halfwidth.value()

    def phi_max(self):
        return self.centre.value() + self.halfwidth.value()

    def params(self):
        return [self.centre, self.halfwidth]


class ElasticParams:
    """Elastic deformation settings: learnable amplitude, fixed smoothness.

    The displacement field is amplitude * gaussian_filter(noise, smoothness)
    in pixel units; smoothness is the filter width in pixels and stays fixed
    for a run.
    """

    def __init__(self, amplitude=1.0, smoothness=3.0, name="elastic"):
        if smoothness <= 0:
            raise ValueError("smoothness must be positive")
        self.amplitude = Parameter(f"{name}/amplitude", float(amplitude), "softplus")
        self.smoothness = float(smoothness)

    def params(self):
        return [self.amplitude]


# ---------------------------------------------------------------------------
# affine machinery
# ---------------------------------------------------------------------------

_IDENTITY_23 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def affine_matrix(phi):
    """2x3 affine map from its six coefficient offsets (phi = 0 is identity).

    The matrix sends output normalized coordinates (x, y, 1) to input
    coordinates; leading batch axes on phi are preserved.
    """
    shape = ad.value_of(phi).shape
    if shape[-1] != 6:
        raise ValueError(f"phi must have trailing dimension 6, got {shape}")
    return ad.add(ad.reshape(phi, shape[:-1] + (2, 3)), _IDENTITY_23)


def rotation_matrix(psi):
    """2x3 matrix rotating normalized coordinates by angle psi (radians)."""
    c, s = ad.cos(psi), ad.sin(psi)
    z = np.zeros(ad.value_of(psi).shape)
    flat = ad.stack([c, ad.mul(s, -1.0), z, s, c, z], axis=-1)
    return ad.reshape(flat, ad.value_of(flat).shape[:-1] + (2, 3))


def sample_params(bounds, u, ctx=None):
    """Reparameterised draw phi = phi_min + u (phi_max - phi_min).

    ``u`` holds uniforms in [0,1] with trailing dimension bounds.dim.  With
    a GradientContext the result is a graph node, differentiable in the
    centre and the unconstrained halfwidth.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != bounds.dim:
        raise ValueError(f"u must have trailing dimension {bounds.dim}, got {u.shape}")
    if ctx is None:
        c = bounds.centre.value()
        h = bounds.halfwidth.value()
    else:
        c = ctx.value(bounds.centre)
        h = ctx.value(bounds.halfwidth)
    return ad.add(c, ad.mul(2.0 * u - 1.0, h))


def _base_coords(H, W):
    """Homogeneous normalized coordinates of every pixel, as a (3, H*W) array."""
    xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.ones(H * W)])


def _affine_grid(matrices, H, W):
    """Sampling grid (..., H, W, 2) from output->input matrices (..., 2, 3)."""
    coords = _base_coords(H, W)
    out = ad.matmul(matrices, coords)               # (..., 2, H*W)
    out = ad.swap_last2(out)                        # (..., H*W, 2)
    lead = ad.value_of(matrices).shape[:-2]
    return ad.reshape(out, lead + (H, W, 2))


def warp_batch(images, matrices):
    """Warp (B, H, W) images by per-image output->input matrices (B, 2, 3)."""
    B, H, W = ad.value_of(images).shape
    return ad.bilinear_sample(images, _affine_grid(matrices, H, W))


def warp(img, matrix):
    """Resample one image under an output->input affine map.

    Accepts an :class:`Image` or a 2-d array; returns the same flavour, or
    a graph node when the matrix (or image) is one.
    """
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
    if ad.value_of(px).ndim != 2:
        raise UnsupportedShape("warp expects a single 2-d image")
    H, W = ad.value_of(px).shape
    out = warp_batch(ad.reshape(px, (1, H, W)), ad.reshape(matrix, (1, 2, 3)))
    out = ad.reshape(out, (H, W))
    if isinstance(out, ad.Node):
        return out
    return Image(out) if isinstance(img, Image) else out


def elastic_warp(img, p, noise, ctx=None):
    """Deform an image by a smoothed random displacement field.

    ``noise`` is a (2, H, W) standard-normal field: channel 0 displaces x,
    channel 1 displaces y, both in pixel units after Gaussian filtering
    with the fixed smoothness. Differentiable w.r.t. the amplitude.
    """
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
    H, W = px.shape
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (2, H, W):
        raise UnsupportedShape(f"noise must have shape (2, {H}, {W}), got {noise.shape}")
    amp = p.amplitude.value() if ctx is None else ctx.value(p.amplitude)
    out = _elastic_batch(px[None], noise[None], amp, p.smoothness)
    out = ad.reshape(out, (H, W))
    if isinstance(out, ad.Node):
        return out
    return Image(out) if isinstance(img, Image) else out


def smoothed_field(noise, smoothness):
    """Gaussian-filtered displacement field; linear in the noise, no params."""
    sigma = (0.0,) * (noise.ndim - 2) + (smoothness, smoothness)
    return gaussian_filter(noise, sigma=sigma)


def _elastic_batch(images, noise, amp, smoothness):
    """Core elastic deformation on (B, H, W) images with (B, 2, H, W) noise."""
    B, H, W = ad.value_of(images).shape
    filt = smoothed_field(noise, smoothness)
    disp = ad.mul(amp, filt)                        # pixels
    # pixel displacements to normalized units per axis
    sx = 2.0 / (W - 1) if W > 1 else 0.0
    sy = 2.0 / (H - 1) if H > 1 else 0.0
    coords = _base_coords(H, W)
    gx = coords[0].reshape(H, W)
    gy = coords[1].reshape(H, W)
    grid = ad.stack(
        [ad.add(gx, ad.mul(ad.take(disp, (slice(None), 0)), sx)),
         ad.add(gy, ad.mul(ad.take(disp, (slice(None), 1)), sy))],
        axis=-1,
    )
    return ad.bilinear_sample(images, grid)


# ---------------------------------------------------------------------------
# finite orbits
# ---------------------------------------------------------------------------

def _pair_rotation(D, theta):
    """Block-diagonal planar rotation by theta on consecutive coordinate pairs."""
    R = np.zeros((D, D))
    c, s = np.cos(theta), np.sin(theta)
    for j in range(0, D, 2):
        R[j, j] = c
        R[j, j + 1] = -s
        R[j + 1, j] = s
        R[j + 1, j + 1] = c
    return R


def rotation_grid_matrices(D, P):
    """The P vector-space rotations of a rotation_grid orbit, shape (P, D, D)."""
    if D % 2 != 0:
        raise UnsupportedShape(f"rotation_grid needs an even vector dimension, got {D}")
    return np.stack([_pair_rotation(D, 2.0 * np.pi * p / P) for p in range(P)])


def orbit_points(x, spec):
    """The ordered orbit 𝒜(x); element 0 is always x itself."""
    if spec.kind == "explicit":
        return [m(x) for m in spec.maps]

    if spec.kind == "coordinate_swap":
        if isinstance(x, Image):
            raise UnsupportedShape("coordinate_swap needs a vector, not an image")
        v = np.asarray(x, dtype=float)
        if v.ndim != 1 or v.shape[0] < 2:
            raise UnsupportedShape("coordinate_swap needs a vector with at least 2 entries")
        swapped = v.copy()
        swapped[[0, 1]] = swapped[[1, 0]]
        return [v.copy(), swapped]

    # rotation_grid
    if isinstance(x, Image):
        return [warp(x, rotation_matrix(2.0 * np.pi * p / spec.P)) for p in range(spec.P)]
    v = np.asarray(x, dtype=float)
    if v.ndim == 2:
        img = Image(v)
        return [warp(img, rotation_matrix(2.0 * np.pi * p / spec.P)).pixels
                for p in range(spec.P)]
    if v.ndim != 1:
        raise UnsupportedShape(f"rotation_grid does not apply to shape {v.shape}")
    mats = rotation_grid_matrices(v.shape[0], spec.P)
    return [mats[p] @ v for p in range(spec.P)]


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

class AugmentationSampler:
    """One augmentation distribution p(x_a|x), possibly with learnable parts.

    Use the classmethod constructors.  Sampling is a pure function of the
    input and the supplied RngStream; parameters enter differentiably when
    a GradientContext is passed.
    """

    def __init__(self, kind, orbit=None, bounds=None, elastic=None, parts=(),
                 image_shape=None):
        self.kind = kind
        self.orbit = orbit
        self.bounds = bounds
        self.elastic = elastic
        self.parts = tuple(parts)
        self.image_shape = image_shape

    @classmethod
    def finite_orbit(cls, spec):
        return cls("finite_orbit", orbit=spec)

    @classmethod
    def affine(cls, bounds, image_shape=None):
        return cls("affine", bounds=bounds, image_shape=image_shape)

    @classmethod
    def elastic_noise(cls, elastic, image_shape=None):
        return cls("elastic", elastic=elastic, image_shape=image_shape)

    @classmethod
    def composite(cls, parts):
        parts = tuple(parts)
        if not parts:
            raise ValueError("composite sampler needs at least one part")
        shape = next((p.image_shape for p in parts if p.image_shape is not None), None)
        return cls("composite", parts=parts, image_shape=shape)

    @property
    def P(self):
        """Orbit size for finite orbits; None for continuous samplers."""
        return self.orbit.P if self.kind == "finite_orbit" else None

    def params(self):
        if self.kind == "affine":
            return self.bounds.params()
        if self.kind == "elastic":
            return self.elastic.params()
        if self.kind == "composite":
            return [p for part in self.parts for p in part.params()]
        return []

    # -- single-input sampling (always plain numpy) ------------------------

    def draw_phi(self, S, stream):
        """S reparameterised coefficient draws (affine samplers only)."""
        if self.kind != "affine":
            raise UnsupportedShape("draw_phi applies to affine samplers")
        u = draw_array(stream, "uniform01", (S, self.bounds.dim))
        return sample_params(self.bounds, u)

    def _matrices(self, phi):
        if self.bounds.mode == "rotation_only":
            lead = ad.value_of(phi).shape[:-1]
            return rotation_matrix(ad.reshape(phi, lead))
        return affine_matrix(phi)

    def _as_pixels(self, x):
        if isinstance(x, Image):
            return x.pixels
        v = np.asarray(x, dtype=float)
        if v.ndim == 2:
            return v
        if v.ndim == 1 and self.image_shape is not None:
            return v.reshape(self.image_shape)
        raise UnsupportedShape(
            f"sampler needs an image (or image_shape set) but got shape {v.shape}")

    def _like(self, pixels, x):
        if isinstance(x, Image):
            return Image(pixels)
        if np.asarray(ad.value_of(x)).ndim == 1:
            return pixels.reshape(-1)
        return pixels

    def draw_set(self, x, S, stream):
        """S augmented copies of one input; see module-level draw_set."""
        if self.kind == "finite_orbit":
            pts = orbit_points(x, self.orbit)
            P = self.orbit.P
            if S > P:
                raise SampleCountExceedsOrbit(f"S={S} exceeds orbit size P={P}")
            u = draw(stream, "uniform01", P)
            idx = np.argsort(u)[:S]
            return [pts[i] for i in idx]

        if self.kind == "affine":
            px = self._as_pixels(x)
            phi = self.draw_phi(S, stream)
            mats = self._matrices(phi)
            out = warp_batch(np.broadcast_to(px, (S,) + px.shape), mats)
            return [self._like(out[s], x) for s in range(S)]

        if self.kind == "elastic":
            px = self._as_pixels(x)
            H, W = px.shape
            noise = draw_array(stream, "standard_normal", (S, 2, H, W))
            out = _elastic_batch(np.broadcast_to(px, (S, H, W)), noise,
                                 self.elastic.amplitude.value(),
                                 self.elastic.smoothness)
            return [self._like(out[s], x) for s in range(S)]

        # composite: apply each part in order, one independent draw per sample
        current = [x] * S
        for i, part in enumerate(self.parts):
            sub = stream.child(f"part{i}")
            current = [part.draw_set(current[s], 1, sub.child(str(s)))[0]
                       for s in range(S)]
        return current


def draw_set(x, sampler, S, stream):
    """Draw S augmented versions of x, deterministically in the stream.

    Finite orbits sample distinct orbit indices uniformly without
    replacement (raising SampleCountExceedsOrbit when S > P); continuous
    samplers draw S iid reparameterised transforms.
    """
    return sampler.draw_set(x, S, stream)


# ---------------------------------------------------------------------------
# batched sampling for training (graph-aware)
# ---------------------------------------------------------------------------

def draw_batch(X, sampler, S, stream, ctx=None, replace=False):
    """Augment a whole batch: (B, D) inputs to a (B, S, D) stack.

    Finite orbits draw index sets per row (without replacement by default,
    iid when ``replace``); continuous samplers draw iid transforms and
    return a graph node when ``ctx`` is given so bound parameters receive
    gradients.  Vector inputs to image samplers are reshaped through the
    sampler's image_shape.
    """
    Xv = ad.value_of(X)
    if Xv.ndim != 2:
        raise UnsupportedShape(f"draw_batch expects (B, D) inputs, got {Xv.shape}")
    B, D = Xv.shape

    if sampler.kind == "finite_orbit":
        if isinstance(X, ad.Node):
            raise UnsupportedShape("finite orbits take plain inputs, not graph nodes")
        X = Xv
        spec = sampler.orbit
        P = spec.P
        if spec.kind == "rotation_grid":
            mats = rotation_grid_matrices(D, P)          # (P, D, D)
            orbit = np.einsum("pij,bj->bpi", mats, X)     # (B, P, D)
        elif spec.kind == "coordinate_swap":
            swapped = X.copy()
            swapped[:, [0, 1]] = swapped[:, [1, 0]]
            orbit = np.stack([X, swapped], axis=1)
        else:
            orbit = np.stack([np.stack([np.asarray(m(X[b]), dtype=float)
                                        for m in spec.maps]) for b in range(B)])
        if replace:
            u = draw_array(stream, "uniform01", (B, S))
            idx = np.minimum((u * P).astype(np.int64), P - 1)
        else:
            if S > P:
                raise SampleCountExceedsOrbit(f"S={S} exceeds orbit size P={P}")
            u = draw_array(stream, "uniform01", (B, P))
            idx = np.argsort(u, axis=1)[:, :S]
        return np.take_along_axis(orbit, idx[:, :, None], axis=1)

    if sampler.kind == "composite":
        out = Xv[:, None, :].repeat(S, axis=1).reshape(B * S, D)
        for i, part in enumerate(sampler.parts):
            out = draw_batch(out, part, 1, stream.child(f"part{i}"), ctx=ctx)
            out = ad.reshape(out, (B * S, D))
        return ad.reshape(out, (B, S, D))

    if sampler.image_shape is None:
        raise UnsupportedShape("continuous samplers need image_shape for flat inputs")
    H, W = sampler.image_shape
    if H * W != D:
        raise UnsupportedShape(f"image_shape {sampler.image_shape} does not match D={D}")
    if isinstance(X, ad.Node):
        imgs = ad.reshape(X, (B, H, W))
        imgs = ad.reshape(ad.stack([imgs] * S, axis=1), (B * S, H, W))
    else:
        imgs = X.reshape(B, H, W).repeat(S, axis=0).reshape(B * S, H, W)

    if sampler.kind == "affine":
        u = draw_array(stream, "uniform01", (B * S, sampler.bounds.dim))
        phi = sample_params(sampler.bounds, u, ctx)
        out = warp_batch(imgs, sampler._matrices(phi))
    else:
        noise = draw_array(stream, "standard_normal", (B * S, 2, H, W))
        amp = (sampler.elastic.amplitude.value() if ctx is None
               else ctx.value(sampler.elastic.amplitude))
        out = _elastic_batch(imgs, noise, amp, sampler.elastic.smoothness)
    return ad.reshape(out, (B, S, D))


# ---------------------------------------------------------------------------
# PGM output for inspecting learned augmentations
# ---------------------------------------------------------------------------

def to_pgm(pixels):
    """Binary PGM (P5, maxval 255) encoding of one [0,1] grayscale image."""
    px = np.asarray(ad.value_of(pixels), dtype=float)
    q = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    return header + q.tobytes()


def sample_sheet(source, samples, pad=2):
    """One row of images: the framed source followed by its augmented samples.

    The source gets a one-pixel bright frame so it is visually distinct;
    entries are separated by ``pad`` columns of mid-gray.
    """
    src = np.asarray(ad.value_of(source), dtype=float)
    framed = src.copy()
    framed[0, :] = framed[-1, :] = 1.0
    framed[:, 0] = framed[:, -1] = 1.0
    tiles = [framed] + [np.asarray(ad.value_of(s), dtype=float) for s in samples]
    H = tiles[0].shape[0]
    spacer = np.full((H, pad), 0.5)
    row = []
    for i, t in enumerate(tiles):
        if i:
            row.append(spacer)
        row.append(t)
    return np.concatenate(row, axis=1)
