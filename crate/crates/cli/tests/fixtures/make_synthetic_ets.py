#!/usr/bin/env python3
"""Regenerates synthetic_ets.csv, a fully synthetic emissions-trading panel.

Shape: ~800 facilities observed 2001-2017 with ~43% of facility-years
missing; staggered entry years that coarsen to phase starts 2005/2008/2013
via the CLI's --cohort-map; a per-year trading indicator implying ~40%
ever-exposed facilities among the treated; one numeric and two categorical
covariates. All values are drawn from a fixed-seed RNG; nothing here is
real data.

A repair pass guarantees that every (phase, sector) and (phase, region)
pair has at least two exposed facilities observed in the phase start year
and the year before it. Without it, a small exposed cell can lose every
moment that anchors the phase to its base year to quasi-separation of a
one-hot column, leaving the whole window unidentified by construction
rather than by design.
"""

import csv
import math
import random

rng = random.Random(20250816)

YEARS = list(range(2001, 2018))
SECTORS = ["cement", "chemicals", "glass", "metals", "paper", "power"]
REGIONS = ["east", "north", "south", "west"]

n_never = 150
phases = [(2005, [2005, 2006, 2007], 260), (2008, list(range(2008, 2013)), 240),
          (2013, [2013, 2014, 2015], 150)]

entries = [None] * n_never
for _, entry_years, count in phases:
    for _ in range(count):
        entries.append(rng.choice(entry_years))
rng.shuffle(entries)

facilities = []
for idx, entry in enumerate(entries):
    phase = None
    if entry is not None:
        phase = max(p for p, ys, _ in phases if entry in ys)
    observed = {y for y in YEARS if rng.random() > 0.43}
    if not observed:
        observed = {rng.choice(YEARS)}
    # Trading: ~40% of treated facilities start trading at or after entry
    # and keep trading; a few never-treated facilities carry a stray flag
    # (forced back to unexposed downstream). The start year is drawn from
    # the facility's observed years so the exposure actually shows up in
    # the emitted rows despite the missingness.
    trade_start = None
    if entry is not None and rng.random() < 0.40:
        candidates = [y for y in sorted(observed) if y >= entry]
        if candidates:
            trade_start = rng.choice(candidates)
    if entry is None and rng.random() < 0.04:
        trade_start = rng.choice(YEARS[5:])
    facilities.append({
        "fid": f"F{idx:04d}",
        "entry": entry,
        "phase": phase,
        "log_capacity": rng.gauss(4.0, 1.0),
        "sector": rng.choice(SECTORS),
        "region": rng.choice(REGIONS),
        "alpha_noise": rng.gauss(0.0, 0.3),
        "trade_start": trade_start,
        "observed": observed,
    })

repaired = 0
for phase, _, _ in phases:
    cohort = [f for f in facilities if f["phase"] == phase]
    for dim in ("sector", "region"):
        for level in {f[dim] for f in cohort}:
            cell = [f for f in cohort if f[dim] == level]
            anchored = [f for f in cell if f["trade_start"] is not None
                        and {phase - 1, phase} <= f["observed"]]
            need = 2 - len(anchored)
            if need <= 0:
                continue
            pool = sorted((f for f in cell if f not in anchored),
                          key=lambda f: (f["trade_start"] is None, f["fid"]))
            for f in pool[:need]:
                if f["trade_start"] is None:
                    f["trade_start"] = max(f["entry"], phase)
                f["observed"] |= {phase - 1, phase}
                repaired += 1

rows = []
for f in facilities:
    alpha = 2.0 + 0.8 * f["log_capacity"] + f["alpha_noise"]
    for year in sorted(f["observed"]):
        y = alpha - 0.01 * (year - 2001) + 0.12 * math.sin(0.7 * year)
        if f["phase"] is not None and year >= f["phase"]:
            y -= 0.05 + 0.02 * (year - f["phase"])
            if f["trade_start"] is not None:
                y -= 0.10
        y += rng.gauss(0.0, 0.15)
        trading = 1 if (f["trade_start"] is not None
                        and year >= f["trade_start"]) else 0
        rows.append([f["fid"], year, f"{y:.6f}",
                     f["entry"] if f["entry"] is not None else "",
                     trading, f"{f['log_capacity']:.6f}",
                     f["sector"], f["region"]])

with open("synthetic_ets.csv", "w", newline="") as out:
    w = csv.writer(out)
    w.writerow(["facility_id", "year", "log_emissions", "entry_year",
                "trading", "log_capacity", "sector", "region"])
    w.writerows(rows)

n_units = len(facilities)
treated = [f for f in facilities if f["entry"] is not None]
exposed = [f for f in treated if f["trade_start"] is not None]
print(f"{len(rows)} rows, {n_units} facilities, {len(treated)} treated, "
      f"{len(exposed)} exposed ({len(exposed) / len(treated):.0%} of treated), "
      f"{1 - len(rows) / (n_units * len(YEARS)):.0%} missing, "
      f"{repaired} repair edits")
