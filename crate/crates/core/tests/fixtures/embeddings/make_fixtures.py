"""Regenerates the embedding-file fixtures with an independent writer."""
import struct

MAGIC = b"VREMB001"
AMINO = "ACDEFGHIKLMNPQRSTVWY"


def table(tag, dim, rows):
    out = MAGIC + struct.pack("<I", len(tag)) + tag.encode() + struct.pack("<II", len(rows), dim)
    for res, vals in rows:
        out += struct.pack("<q", res) + struct.pack("<%df" % len(vals), *vals)
    return out


def onehot(seq, offset):
    return [(offset + k, [1.0 if AMINO[j] == ch else 0.0 for j in range(20)]) for k, ch in enumerate(seq)]


def dense(dim, residues):
    return [(r, [(r * dim + j) * 0.25 - 4.0 for j in range(dim)]) for r in residues]


files = {
    "onehot_acd.vremb": table("onehot", 20, onehot("ACD", 1)),
    "onehot_all.vremb": table("onehot", 20, onehot(AMINO, -5)),
    "dense_dim8.vremb": table("fixture-dense", 8, dense(8, [5, 6, 7, 10])),
    "empty_dim480.vremb": table("fixture-empty", 480, []),
    # malformed
    "short_row.vremb": table("fixture-short", 480, [(1, [0.5] * 480), (2, [0.5] * 100)]),
    "duplicate_index.vremb": table("fixture-dup", 4, dense(4, [3, 3])),
    "bad_magic.vremb": b"VREMB999" + table("x", 1, [(0, [1.0])])[8:],
    "trailing_bytes.vremb": table("fixture-trail", 2, dense(2, [1])) + b"\x00\x00",
    "nan_value.vremb": table("fixture-nan", 2, [(1, [0.0, float("nan")])]),
}

if __name__ == "__main__":
    # the short-row file declares two 480-wide rows but the second stops after 100 values
    for name, data in files.items():
        with open(name, "wb") as f:
            f.write(data)
