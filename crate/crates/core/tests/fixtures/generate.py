"""Regenerates the synthetic fixture files. The prices are simulated, not market data."""

import datetime as dt
import json
import random
from pathlib import Path

HERE = Path(__file__).parent

HOLIDAYS_2021 = {
    dt.date(2021, 1, 1), dt.date(2021, 1, 18), dt.date(2021, 2, 15), dt.date(2021, 4, 2),
    dt.date(2021, 5, 31), dt.date(2021, 7, 5), dt.date(2021, 9, 6), dt.date(2021, 11, 25),
    dt.date(2021, 12, 24),
}


def trading_days(year):
    day = dt.date(year, 1, 1)
    out = []
    while day.year == year:
        if day.weekday() < 5 and day not in HOLIDAYS_2021:
            out.append(day)
        day += dt.timedelta(days=1)
    return out


def simulate(seed, start, drift, vol, days):
    rng = random.Random(seed)
    rows = []
    close = start
    for day in days:
        open_ = round(close * (1 + rng.gauss(0, vol / 3)), 2)
        close = round(close * (1 + drift + rng.gauss(0, vol)), 2)
        high = round(max(open_, close) * (1 + abs(rng.gauss(0, vol / 2))), 2)
        low = round(min(open_, close) * (1 - abs(rng.gauss(0, vol / 2))), 2)
        volume = int(rng.uniform(15e6, 45e6))
        rows.append((day.isoformat(), open_, high, low, close, round(close * 0.99, 2), volume))
    return rows


def write_csv(path, rows):
    with open(path, "w") as f:
        f.write("date,open,high,low,close,adj_close,volume\n")
        for r in rows:
            f.write(",".join(str(v) for v in r) + "\n")


HEADLINES = [
    "Microsoft beats estimates as cloud growth accelerates",
    "Microsoft shares climb on record profit",
    "Analysts upgrade Microsoft on strong momentum",
    "Microsoft faces antitrust probe in Europe",
    "Outage hits Microsoft cloud customers",
    "Microsoft raises dividend and expands buyback",
    "Tech selloff weighs on Microsoft",
    "Microsoft stock falls as rate fears grow",
    "Microsoft launches new partnership with chip maker",
    "Microsoft gaming revenue did not disappoint",
    "Concerns over slowing PC sales",
    "Microsoft rallies after upbeat guidance",
]


def main():
    days = trading_days(2021)
    assert len(days) == 252
    msft = simulate(2021, 222.42, 0.0015, 0.013, days)
    write_csv(HERE / "msft_2021.csv", msft)
    write_csv(HERE / "cache" / "MSFT.csv", msft)
    write_csv(HERE / "cache" / "AAPL.csv", simulate(7, 132.05, 0.0012, 0.016, days))
    write_csv(HERE / "cache" / "JPM.csv", simulate(11, 127.07, 0.0003, 0.014, days))
    write_csv(HERE / "cache" / "XOM.csv", simulate(13, 41.22, -0.0008, 0.018, days))

    rng = random.Random(5)
    with open(HERE / "msft_news_2021.jsonl", "w") as f:
        for day in sorted(rng.sample(days, 60)):
            f.write(json.dumps({"date": day.isoformat(), "symbol": "MSFT", "text": rng.choice(HEADLINES)}) + "\n")

    with open(HERE / "fundamentals.csv", "w") as f:
        f.write("symbol,price,eps,sales_per_share,sector\n")
        f.write("MSFT,336.32,8.05,22.19,technology\n")
        f.write("AAPL,177.57,5.61,21.69,technology\n")
        f.write("JPM,158.35,15.36,39.51,financials\n")
        f.write("XOM,61.19,5.39,67.57,energy\n")


if __name__ == "__main__":
    main()
