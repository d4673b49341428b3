"""Small hand-built models and datasets shared across test modules."""

import numpy as np

from covgam import data, mcd
from covgam.basis import Assembly, PredictorBlock, PenaltyBlock, matrix_rank_psd


def toy_assembly(n, d, blocks, pens=(), offsets=None):
    """Assembly with explicit design blocks.

    ``blocks`` maps 0-based predictor index to an (n, p_j) matrix; ``pens``
    is a list of (predictor, S, local_col_offset) triples, one smoothing
    parameter each.
    """
    tables = mcd.build_index_tables(d)
    q = tables.q
    if offsets is None:
        off = np.zeros((n, q))
    else:
        off = np.broadcast_to(np.asarray(offsets, dtype=float), (n, q)).copy()
    predictors, slices, pos = [], [], 0
    for j in range(q):
        X = np.asarray(blocks.get(j, np.zeros((n, 0))), dtype=float)
        predictors.append(PredictorBlock(j, [], X, off[:, j].copy()))
        slices.append(slice(pos, pos + X.shape[1]))
        pos += X.shape[1]
    penalties = []
    for group, (j, S, local) in enumerate(pens):
        S = np.asarray(S, dtype=float)
        sl = slices[j]
        rows = slice(sl.start + local, sl.start + local + S.shape[0])
        penalties.append(PenaltyBlock(j, f"pen{group}", S, matrix_rank_psd(S),
                                      rows, group))
    return Assembly(tables, predictors, penalties, slices, pos)


def make_dataset(responses, columns, start="2014-01-01T00:00:00", categoricals=()):
    """Dataset from raw arrays with synthetic half-hourly timestamps."""
    responses = np.asarray(responses, dtype=float)
    if responses.ndim == 1:
        responses = responses[:, None]
    n, d = responses.shape
    ts = np.datetime64(start, "s") + np.arange(n) * np.timedelta64(30, "m")
    cols = {}
    for name, values in columns.items():
        if name in categoricals:
            values = np.asarray(values)
            levels = list(dict.fromkeys(values.tolist()))
            lut = {v: i for i, v in enumerate(levels)}
            codes = np.array([lut[v] for v in values], dtype=np.int64)
            cols[name] = data.Column(name, "categorical", codes, tuple(levels))
        else:
            cols[name] = data.Column(name, "continuous", np.asarray(values, dtype=float))
    names = [f"y_{g}" for g in range(1, d + 1)]
    return data.Dataset(ts, responses, names, cols)
