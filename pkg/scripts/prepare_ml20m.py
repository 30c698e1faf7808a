"""Convert the MovieLens-20M CSV release into ccfcrec input files.

Every rating becomes an implicit interaction.  Items get a multi-hot genre
field and a one-hot release-decade field parsed from the title.  Optional
precomputed image vectors (one ``item_id<TAB>v1,v2,...`` line per movie) can
be attached as a dense field with ``--image``.

    python scripts/prepare_ml20m.py --ml20m ml-20m --out data/ml20m
"""
import argparse
import csv
import json
import re
from pathlib import Path

from ccfcrec.data import AttributeField, AttributeSchema

DECADE = re.compile(r"\((\d{3})\d\)\s*$")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ml20m", required=True, help="directory holding ratings.csv and movies.csv")
    ap.add_argument("--out", required=True)
    ap.add_argument("--image", help="TSV of precomputed image vectors keyed by movieId")
    ap.add_argument("--image-dim", type=int, default=4096)
    args = ap.parse_args(argv)
    src, out = Path(args.ml20m), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    movies = {}
    with open(src / "movies.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            genres = [g for g in row["genres"].split("|") if g and g != "(no genres listed)"]
            m = DECADE.search(row["title"])
            movies[row["movieId"]] = (genres, m.group(1) + "0s" if m else "unknown")

    rated = set()
    with open(src / "ratings.csv", newline="", encoding="utf-8") as fh, open(out / "interactions.tsv", "w") as dst:
        for row in csv.DictReader(fh):
            if row["movieId"] not in movies:
                continue
            rated.add(row["movieId"])
            dst.write(f"u{row['userId']}\tm{row['movieId']}\t{row['timestamp']}\n")

    genres = sorted({g for mid in rated for g in movies[mid][0]})
    decades = sorted({movies[mid][1] for mid in rated})
    fields = [AttributeField("genre", "multi-hot", vocab=tuple(genres)), AttributeField("decade", "one-hot", vocab=tuple(decades))]
    dense = {}
    if args.image:
        fields.append(AttributeField("image", "dense", dim=args.image_dim))
        dense["image"] = args.image
    AttributeSchema(tuple(fields)).save(out / "schema.json")
    with open(out / "attributes.jsonl", "w", encoding="utf-8") as fh:
        for mid in sorted(rated, key=int):
            g, dec = movies[mid]
            fh.write(json.dumps({"item_id": f"m{mid}", "attrs": {"genre": g, "decade": dec}}) + "\n")

    run = {
        "interactions": "interactions.tsv",
        "attributes": "attributes.jsonl",
        "schema": "schema.json",
        "dense": dense,
        "output_dir": "run",
        # ML-20M profile: d=128, lr=5e-6, batch 1024, 10 positives, 40 negatives, lambda 0.5
        "hyper": {"d": 128, "lr": 5e-6, "batch_size": 1024, "n_pos": 10, "n_neg": 40, "lam": 0.5, "tau": 0.1},
    }
    (out / "run.json").write_text(json.dumps(run, indent=2) + "\n", encoding="utf-8")
    print(f"{len(rated)} rated movies written to {out}")


if __name__ == "__main__":
    main()
