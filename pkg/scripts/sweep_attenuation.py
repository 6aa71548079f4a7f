"""QBER versus extra attenuation on the shipped 4-port star, as CSV.

Usage: python scripts/sweep_attenuation.py --stop 25 --step 5 --frames 8000000
"""

import argparse
import math
from pathlib import Path

from wdmqkd.netsim import default_fourport_network, sweep_attenuation, sweep_rows_to_csv
from wdmqkd.protocol import SessionConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--start", type=float, default=0.0)
    ap.add_argument("--stop", type=float, default=25.0)
    ap.add_argument("--step", type=float, default=5.0)
    ap.add_argument("--frames", type=int, default=8_000_000)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()

    if args.step <= 0 or args.stop < args.start:
        raise SystemExit("need step > 0 and stop >= start")
    n_points = int(math.floor((args.stop - args.start) / args.step + 1e-9)) + 1
    db_list = [args.start + i * args.step for i in range(n_points)]

    spec = default_fourport_network()
    cfg = SessionConfig(
        server=0, clients=(1, 2, 3), n_frames=args.frames, seed=args.seed
    )
    rows = sweep_attenuation(spec, cfg, db_list)
    Path(args.out).write_text(sweep_rows_to_csv(rows), encoding="utf-8")
    print(f"{len(rows)} rows -> {args.out}")
    for row in rows:
        q = "nan" if math.isnan(row.qber) else f"{row.qber:.5f}"
        print(
            f"{row.atten_db:5.1f} dB ({row.length_km:6.1f} km)  "
            f"{row.channel_nm} nm  qber {q:>8}  "
            f"sift {row.sift_rate_hz:8.1f} Hz  {row.status}"
        )


if __name__ == "__main__":
    main()
