"""
Similarity primitives - cosine similarity for vectors and latent frames.

All accumulation happens in float64; inputs may be float32.
"""
import numpy as np

from app.utils.errors import DataFormatError


class SimilarityError(DataFormatError, ValueError):
    """Operands have different sizes or one of them has zero norm."""
    pass


def cosine_similarity(a, b) -> float:
    """
    dot(a, b) / (|a| * |b|), clipped to [-1, 1].

    Raises:
        SimilarityError: on dimension mismatch, empty input or a zero-norm operand
    """
    va = np.asarray(a, dtype=np.float64).reshape(-1)
    vb = np.asarray(b, dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise SimilarityError(f"Dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    if va.size == 0:
        raise SimilarityError("Cannot compare empty vectors")

    norm_a = np.linalg.norm(va)
    norm_b = np.linalg.norm(vb)
    if norm_a == 0.0 or norm_b == 0.0:
        raise SimilarityError("Cosine similarity is undefined for a zero-norm vector")

    score = float(np.dot(va, vb) / (norm_a * norm_b))
    return max(-1.0, min(1.0, score))


def frame_similarity(f1: np.ndarray, f2: np.ndarray) -> float:
    """Cosine similarity of two equally shaped frames, flattened."""
    if np.shape(f1) != np.shape(f2):
        raise SimilarityError(f"Frame shape mismatch: {np.shape(f1)} vs {np.shape(f2)}")
    return cosine_similarity(f1, f2)


def frame_similarity_matrix(frames: np.ndarray) -> np.ndarray:
    """
    Pairwise frame similarities for an (F, H, W, C) latent.

    Zero frames are identical to each other (1.0) and orthogonal to everything else (0.0).
    Bit-identical frames score exactly 1.0.
    """
    flat = np.asarray(frames, dtype=np.float64).reshape(frames.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = flat / safe[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    if zero.any():
        sims[zero, :] = 0.0
        sims[:, zero] = 0.0
        sims[np.ix_(zero, zero)] = 1.0
    _, groups = np.unique(flat, axis=0, return_inverse=True)
    groups = groups.reshape(-1)
    sims[groups[:, None] == groups[None, :]] = 1.0
    return sims


def paired_frame_similarities(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Similarity of a[i] vs b[i] for two stacks of equally shaped frames."""
    if a.shape != b.shape:
        raise SimilarityError(f"Frame stack mismatch: {a.shape} vs {b.shape}")
    fa = np.asarray(a, dtype=np.float64).reshape(a.shape[0], -1)
    fb = np.asarray(b, dtype=np.float64).reshape(b.shape[0], -1)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    dots = np.einsum('ij,ij->i', fa, fb)
    both_zero = (na == 0.0) & (nb == 0.0)
    denom = np.where((na == 0.0) | (nb == 0.0), 1.0, na * nb)
    sims = np.where((na == 0.0) | (nb == 0.0), 0.0, dots / denom)
    sims = np.where(both_zero, 1.0, sims)
    return np.clip(sims, -1.0, 1.0)
