#!/usr/bin/env python3
"""Download the UCI energy and yacht datasets as the CSVs `sogp` expects.

The library never touches the network. Run this once, then either leave the
files in crates/core/data/uci/ (the default) or point SOGP_UCI_DIR at the
output directory.

Output schema: a header row, numeric inputs, target in the last column.
  energy.csv  X1..X8, Y1        (heating load; cooling load Y2 dropped), 768 rows
  yacht.csv   X1..X6, Y         (residuary resistance), 308 rows

Needs pandas and openpyxl for the energy spreadsheet.
"""

import argparse
import io
import pathlib
import urllib.request

import pandas as pd

BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases"
ENERGY_URL = f"{BASE}/00242/ENB2012_data.xlsx"
YACHT_URL = f"{BASE}/00243/yacht_hydrodynamics.data"


def fetch(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as r:
        return r.read()


def energy() -> pd.DataFrame:
    df = pd.read_excel(io.BytesIO(fetch(ENERGY_URL))).dropna(how="all")
    return df[[f"X{i}" for i in range(1, 9)] + ["Y1"]]


def yacht() -> pd.DataFrame:
    text = fetch(YACHT_URL).decode()
    df = pd.read_csv(io.StringIO(text), sep=r"\s+", header=None).dropna()
    df.columns = [f"X{i}" for i in range(1, 7)] + ["Y"]
    return df


def main() -> None:
    default = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "data" / "uci"
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=pathlib.Path, default=default)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, load in [("energy", energy), ("yacht", yacht)]:
        df = load()
        path = args.out / f"{name}.csv"
        df.to_csv(path, index=False)
        print(f"{path}: {len(df)} rows, {df.shape[1] - 1} inputs")


if __name__ == "__main__":
    main()
