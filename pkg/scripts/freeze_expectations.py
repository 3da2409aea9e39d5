"""Regenerate src/nlquant/data/expectations.json from measured sweeps.

Run once after a deliberate kernel change; the file is then checked in and
`nlquant sweep` compares later runs against it.
"""

import json
import math
from pathlib import Path

from nlquant.refmodel import sweep_error
from nlquant.tensorio import DEFAULT_SWEEP_DOMAINS

OUT = Path(__file__).resolve().parents[1] / "src" / "nlquant" / "data" / "expectations.json"
MARGIN = 1.001


def round_up(v, digits=4):
    if v == 0:
        return 0.0
    e = math.floor(math.log10(abs(v))) - digits + 1
    return float(f"{math.ceil(v * MARGIN / 10 ** e)}e{e}")


def main():
    sweeps = {}
    for kernel, domain in DEFAULT_SWEEP_DOMAINS.items():
        r = sweep_error(kernel, domain)
        sweeps[kernel] = {
            "domain": domain,
            "max_abs_error": round_up(r.max_abs_error),
            "max_rel_error": round_up(r.max_rel_error),
        }
        print(f"{kernel:10s} {domain:14s} abs {r.max_abs_error:.6g} rel {r.max_rel_error:.6g}")
    OUT.write_text(json.dumps({"sweeps": sweeps}, indent=2) + "\n")


if __name__ == "__main__":
    main()
