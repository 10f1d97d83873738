"""Weight files: ASCII header (names, shapes, endianness) + raw float64 payload."""

import numpy as np

from ..exceptions import DataError

_MAGIC = "tensorfile v1"


def save_weights(params, path):
    """Write a {name: array} dict; payload order follows the header."""
    lines = [_MAGIC, "endian little", "dtype float64"]
    for name, arr in params.items():
        if " " in name:
            raise DataError(f"tensor name {name!r} contains a space")
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {dims}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in params.values():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())


def load_weights(path):
    """Read a weight file back into a {name: array} dict."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read weights {path}: {exc}") from None
    nl = blob.find(b"\nend\n")
    if nl < 0:
        raise DataError(f"{path}: corrupt header (no end marker)")
    header = blob[:nl].decode("ascii", errors="replace").splitlines()
    payload = blob[nl + len(b"\nend\n"):]
    if not header or header[0] != _MAGIC:
        raise DataError(f"{path}: not a weight file (bad magic)")
    specs = []
    for line in header[1:]:
        fields = line.split()
        if fields[0] == "endian":
            if fields[1] != "little":
                raise DataError(f"{path}: unsupported endianness {fields[1]}")
        elif fields[0] == "dtype":
            if fields[1] != "float64":
                raise DataError(f"{path}: unsupported dtype {fields[1]}")
        elif fields[0] == "tensor":
            name = fields[1]
            if fields[2:] == ["scalar"]:
                shape = ()
            else:
                try:
                    shape = tuple(int(d) for d in fields[2:])
                except ValueError:
                    raise DataError(
                        f"{path}: bad shape in {line!r}") from None
            specs.append((name, shape))
        else:
            raise DataError(f"{path}: unexpected header line {line!r}")
    total = sum(int(np.prod(shape, dtype=np.int64)) if shape else 1
                for _, shape in specs)
    if len(payload) != total * 8:
        raise DataError(
            f"{path}: payload holds {len(payload)} bytes, header promises "
            f"{total * 8}")
    out = {}
    offset = 0
    for name, shape in specs:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
        offset += n * 8
    return out
