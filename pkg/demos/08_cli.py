# coding: utf-8

# # Driving a whole experiment from a JSON config
#
# The `d2ft` command runs partition, score, schedule, simulate, train and
# report as separate steps or all at once with `run`. Here it is called
# in-process on a small config.

# In[1]:

import csv
import json
import tempfile
from pathlib import Path

from d2ft.cli import main

work = Path(tempfile.mkdtemp())
config = {"seed": 0, "seeds": [0, 1], "policies": ["d2ft", "random"],
          "dataset": {"num_samples": 80}, "train": {"epochs": 3}}
(work / "run.json").write_text(json.dumps(config))

code = main(["run", "--config", str(work / "run.json"), "--out", str(work / "out")])
print("exit code", code)
print(sorted(p.name for p in (work / "out").iterdir()))


# In[2]:

with open(work / "out" / "report.csv", newline="") as f:
    for row in csv.DictReader(f):
        print(row)
