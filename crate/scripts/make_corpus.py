"""Writes data/corpus.txt: ~100 KB of seeded, English-like prose for byte-level runs."""

import argparse
import random

SUBJECTS = [
    "the farmer", "a young girl", "the old man", "my brother", "the teacher", "a small dog",
    "the captain", "our neighbor", "the baker", "a tired student", "the doctor", "her mother",
    "the river", "a quiet boy", "the king", "the children", "a traveler", "the cat",
]
VERBS = [
    "walked to", "looked at", "found", "carried", "painted", "opened", "remembered",
    "cleaned", "watched", "followed", "built", "visited", "forgot", "sold", "repaired",
]
OBJECTS = [
    "the red door", "a wooden box", "the long road", "an empty house", "the garden",
    "a broken cart", "the morning market", "a letter", "the tall tree", "the village well",
    "a basket of apples", "the stone bridge", "an old map", "the winter coat", "the small boat",
]
ADVERBS = ["slowly", "quickly", "again", "carefully", "at last", "without a word", "every day", "before dawn"]
CONNECTORS = ["and then", "but", "so", "because", "while", "after that"]
TIMES = ["In the morning", "Later that day", "At night", "On Sunday", "Before the rain", "Long ago", "That summer"]
FEELINGS = ["happy", "afraid", "tired", "proud", "quiet", "hungry", "warm", "surprised"]


def clause(rng):
    s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.4:
        s += f" {rng.choice(ADVERBS)}"
    return s


def sentence(rng):
    r = rng.random()
    if r < 0.25:
        s = f"{rng.choice(TIMES)}, {clause(rng)}."
    elif r < 0.55:
        s = f"{clause(rng)} {rng.choice(CONNECTORS)} {clause(rng)}."
    elif r < 0.7:
        s = f"{rng.choice(SUBJECTS)} felt {rng.choice(FEELINGS)}."
    elif r < 0.8:
        s = f'"Where is {rng.choice(OBJECTS)}?" asked {rng.choice(SUBJECTS)}.'
    else:
        s = f"{clause(rng)}."
    return s[0].upper() + s[1:]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    parts, size = [], 0
    while size < args.bytes:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    text = "".join(parts)[: args.bytes]
    with open(args.out, "w", encoding="ascii") as f:
        f.write(text)


if __name__ == "__main__":
    main()
