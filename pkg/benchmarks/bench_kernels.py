"""Time each kernel under every available backend.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json PATH]
"""

import argparse
import json
import timeit

import numpy as np

from stensemble import kernels


def _graph(rng, n, p):
    mask = rng.random((n, n)) < p
    mask = mask | mask.T
    np.fill_diagonal(mask, True)
    indptr = np.concatenate([[0], np.cumsum(mask.sum(1))]).astype(np.int64)
    return indptr, np.nonzero(mask)[1].astype(np.int64)


def cases(rng):
    """(name, size label, callable factory taking a backend module)."""
    out = []
    for n in (40, 120):
        a = rng.normal(size=(n, n))
        a = (a + a.T) / 2
        out.append(("jacobi_eigh", f"n={n}", lambda k, a=a: k.jacobi_eigh(a, 1e-15, 100)))
    for n in (100, 300):
        X = rng.normal(size=(n, 5))
        D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
        out.append(("linkage_cut", f"n={n}", lambda k, D=D: k.linkage_cut(D, 3, 0)))
    for n in (100, 300):
        indptr, indices = _graph(rng, n, 0.3)
        L, R, G = rng.normal(size=(n, 16)), rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
        a = rng.normal(size=16)
        _, alpha = kernels.get_backend("python").gat_forward(L, R, a, indptr, indices, 0.2)
        out.append(("gat_forward", f"n={n},E={len(indices)}",
                    lambda k, L=L, R=R, a=a, p=indptr, i=indices:
                    k.gat_forward(L, R, a, p, i, 0.2)))
        out.append(("gat_backward", f"n={n},E={len(indices)}",
                    lambda k, L=L, R=R, a=a, p=indptr, i=indices, al=alpha, G=G:
                    k.gat_backward(L, R, a, p, i, 0.2, al, G)))
    for T in (100, 300):
        XW, U, dH = rng.normal(size=(T, 32)), rng.normal(size=(32, 8)), rng.normal(size=(T, 8))
        fwd = kernels.get_backend("python").lstm_forward(XW, U)
        out.append(("lstm_forward", f"T={T},h=8", lambda k, XW=XW, U=U: k.lstm_forward(XW, U)))
        out.append(("lstm_backward", f"T={T},h=8",
                    lambda k, U=U, f=fwd, dH=dH: k.lstm_backward(U, *f, dH)))
    return out


def run(repeat=5):
    rng = np.random.default_rng(0)
    names = kernels.available_backends()
    rows = []
    for kernel, size, fn in cases(rng):
        row = {"kernel": kernel, "size": size}
        for b in names:
            mod = kernels.get_backend(b)
            t = timeit.Timer(lambda: fn(mod))
            number = max(1, int(0.2 / max(t.timeit(1), 1e-6)))
            row[b] = min(t.repeat(repeat, number)) / number
        rows.append(row)
    return names, rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args()
    names, rows = run(args.repeat)
    head = f"{'kernel':<14} {'size':<16}" + "".join(f"{n + ' (ms)':>16}" for n in names)
    if len(names) > 1:
        head += f"{'speedup':>10}"
    print(head)
    for r in rows:
        line = f"{r['kernel']:<14} {r['size']:<16}" + "".join(f"{r[n] * 1e3:>16.3f}" for n in names)
        if len(names) > 1:
            line += f"{r['python'] / r[names[0]]:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
