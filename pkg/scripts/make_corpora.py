"""Regenerate the two bundled corpora under src/elasticlab/corpora/.

Both are synthetic and released into the public domain.  ``arith.txt`` holds
short word problems with worked answers; ``code.txt`` holds small Python
functions with docstrings.  Output is deterministic.
"""

import random
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "elasticlab" / "corpora"

NAMES = ["Ada", "Ben", "Cleo", "Dev", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jun", "Kai", "Lena",
         "Milo", "Nia", "Omar", "Pia", "Quin", "Rosa", "Sam", "Tao"]
ITEMS = ["apples", "pencils", "marbles", "books", "stamps", "cookies", "shells", "coins",
         "cards", "stickers", "eggs", "plums"]
PLACES = ["market", "school", "library", "park", "bakery", "garden"]


def arith_problem(rng: random.Random) -> str:
    a, b = rng.sample(NAMES, 2)
    item = rng.choice(ITEMS)
    form = rng.randrange(5)
    x, y, z = rng.randint(2, 40), rng.randint(2, 20), rng.randint(2, 9)
    if form == 0:
        q = f"{a} has {x} {item}. {b} gives {a} {y} more. How many {item} does {a} have now?"
        s = f"{a} starts with {x} {item} and gets {y} more, so {x} + {y} = {x + y}."
        ans = x + y
    elif form == 1:
        x = x + y
        q = f"{a} had {x} {item} and gave {y} of them to {b}. How many {item} are left?"
        s = f"{a} gives away {y}, so {x} - {y} = {x - y}."
        ans = x - y
    elif form == 2:
        q = f"There are {z} boxes at the {rng.choice(PLACES)}. Each box holds {y} {item}. How many {item} are there in all?"
        s = f"Each of the {z} boxes holds {y}, so {z} * {y} = {z * y}."
        ans = z * y
    elif form == 3:
        total = z * y
        q = f"{a} shares {total} {item} equally among {z} friends. How many {item} does each friend get?"
        s = f"Splitting {total} into {z} equal parts gives {total} / {z} = {y}."
        ans = y
    else:
        p = rng.randint(2, 9)
        q = (f"{a} buys {z} {item} for {p} dollars each and pays with a {z * p + y} dollar bill. "
             f"How much change does {a} get?")
        s = f"The {item} cost {z} * {p} = {z * p} dollars. The change is {z * p + y} - {z * p} = {y}."
        ans = y
    return f"Question: {q}\nAnswer: {s}\n#### {ans}\n\n"


VERBS = [("add", "+"), ("subtract", "-"), ("multiply", "*")]
NOUNS = ["values", "items", "numbers", "scores", "counts", "weights"]


def code_snippet(rng: random.Random) -> str:
    form = rng.randrange(5)
    noun = rng.choice(NOUNS)
    n = rng.randint(2, 9)
    if form == 0:
        verb, op = rng.choice(VERBS)
        return (f"def {verb}_{n}(x):\n"
                f"    \"\"\"Return x {op} {n}.\"\"\"\n"
                f"    return x {op} {n}\n\n\n")
    if form == 1:
        return (f"def sum_{noun}({noun}):\n"
                f"    \"\"\"Return the sum of the {noun}.\"\"\"\n"
                f"    total = 0\n"
                f"    for v in {noun}:\n"
                f"        total += v\n"
                f"    return total\n\n\n")
    if form == 2:
        return (f"def count_above_{n}({noun}):\n"
                f"    \"\"\"Count the {noun} greater than {n}.\"\"\"\n"
                f"    return len([v for v in {noun} if v > {n}])\n\n\n")
    if form == 3:
        return (f"def max_{noun}({noun}):\n"
                f"    \"\"\"Return the largest of the {noun}, or None if empty.\"\"\"\n"
                f"    if not {noun}:\n"
                f"        return None\n"
                f"    best = {noun}[0]\n"
                f"    for v in {noun}[1:]:\n"
                f"        if v > best:\n"
                f"            best = v\n"
                f"    return best\n\n\n")
    return (f"def repeat_{n}(s):\n"
            f"    \"\"\"Return s repeated {n} times.\"\"\"\n"
            f"    return s * {n}\n\n\n"
            f">>> repeat_{n}('ab')\n'{'ab' * n}'\n\n")


def build(fn, seed: int, target_bytes: int) -> str:
    rng = random.Random(seed)
    parts, size = [], 0
    while size < target_bytes:
        piece = fn(rng)
        parts.append(piece)
        size += len(piece)
    return "".join(parts)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "arith.txt").write_text(build(arith_problem, 1, 160_000))
    (OUT / "code.txt").write_text(build(code_snippet, 2, 160_000))


if __name__ == "__main__":
    main()
