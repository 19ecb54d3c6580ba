"""Attention-sink suppression on a cross-attention row.

Raw text-to-image attention tends to pile mass onto boundary pixels. The
filter zeroes entries that are simultaneously in the per-row top-k and on the
border ring, then renormalizes the row, so interior structure survives while
boundary sinks disappear.
"""

import numpy as np

from maskfuse import AttentionMap, GridShape, SinkFilterConfig, suppress_attention_sink

grid = GridShape(8, 8)

# One attention row: a genuine blob of interest around pixel (3, 3) plus a
# pathological spike in the top-left corner (a classic sink).
yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
blob = np.exp(-((yy - 3.0) ** 2 + (xx - 3.0) ** 2) / 4.0)
row = blob.ravel().astype(np.float64)
row[0] = row.sum()  # the corner hoards as much mass as everything else
row /= row.sum()

a = AttentionMap(row[None, :].astype(np.float32))
cfg = SinkFilterConfig(p=2 / 64, border_width=1)  # k = 2
filtered = suppress_attention_sink(a, grid, cfg)

print("corner weight before:", float(a.weights[0, 0]))
print("corner weight after: ", float(filtered.weights[0, 0]))
print("row sum after:       ", float(filtered.weights[0].sum()))
peak = int(np.argmax(filtered.weights[0]))
print(f"surviving peak at pixel ({peak // 8}, {peak % 8}), the interior blob")

# The second-largest value sits mid-blob, off the border, so only the corner
# was eligible: top-k AND edge is a conjunction, not a union.
interior_before = a.weights[0, 3 * 8 + 3]
interior_after = filtered.weights[0, 3 * 8 + 3]
print("interior peak scaled by", float(interior_after / interior_before), "(renormalization only)")
