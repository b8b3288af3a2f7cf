#!/usr/bin/env python3
"""Regenerates the toy corpora under data/.

Topic-structured synthetic English in Penn Treebank layout: lower case,
pre-tokenized, one sentence per line, numbers replaced by "N" and rare
words by "<unk>". A topic persists over a run of sentences so that the
next-token distribution depends on more than the previous word.

Usage: python3 data/gen_toy_corpus.py
"""

import os
import random

TOPICS = {
    "market": dict(
        nouns="stock shares market price investors trading bonds yield fund dollar "
              "profit earnings index broker quarter analyst currency futures merger lender rates debt".split(),
        verbs="rose fell gained dropped traded closed jumped slipped".split(),
        adjs="higher lower strong weak volatile quiet".split(),
    ),
    "politics": dict(
        nouns="senate vote bill president congress law committee election party "
              "governor campaign policy court budget official reform voters senator treaty agency tax mayor".split(),
        verbs="passed rejected approved signed debated blocked proposed delayed".split(),
        adjs="federal new controversial local major final".split(),
    ),
    "science": dict(
        nouns="researchers study cells data experiment theory laboratory energy "
              "particle results sample gene climate model drug patients virus protein telescope species ocean fossil".split(),
        verbs="found showed measured tested observed predicted confirmed reported".split(),
        adjs="early significant small clinical rare new".split(),
    ),
    "sports": dict(
        nouns="team game season coach players league match goal fans title "
              "stadium victory defense pitcher round series striker referee injury draft rookie tournament".split(),
        verbs="won lost played scored beat tied signed traded".split(),
        adjs="final home young veteran tough big".split(),
    ),
    "weather": dict(
        nouns="storm rain snow wind temperatures coast river flood forecast "
              "region winter summer heat clouds roads night hail fog drought ice power valley".split(),
        verbs="hit moved reached caused closed brought dropped spread".split(),
        adjs="heavy cold warm severe dry light".split(),
    ),
}

RARE = "zeppelin quorum octopus marmalade bassoon trellis".split()


def noun_phrase(rng, t):
    np = []
    np.append(rng.choice(["the", "the", "a", "N"]))
    if rng.random() < 0.4:
        np.append(rng.choice(t["adjs"]))
    np.append(rng.choice(t["nouns"]))
    if rng.random() < 0.25:
        np += ["of", "the", rng.choice(t["nouns"])]
    return np


def sentence(rng, t):
    s = noun_phrase(rng, t)
    s.append(rng.choice(t["verbs"]))
    r = rng.random()
    if r < 0.35:
        s += noun_phrase(rng, t)
    elif r < 0.6:
        s += [rng.choice(["in", "on", "by", "with", "from"])] + noun_phrase(rng, t)
    elif r < 0.8:
        s += ["N", rng.choice(["percent", "points", "times"])]
    else:
        s += ["as", "the", rng.choice(t["nouns"]), rng.choice(t["verbs"])]
    if rng.random() < 0.3:
        s = [rng.choice(["they", "it"]), "said"] + s if rng.random() < 0.5 else s + ["and"] + noun_phrase(rng, t) + [rng.choice(t["verbs"])]
    if rng.random() < 0.05:
        s.insert(rng.randrange(len(s) + 1), rng.choice(RARE))
    return s


def corpus(rng, n_sentences):
    lines = []
    topic = rng.choice(sorted(TOPICS))
    for _ in range(n_sentences):
        if rng.random() < 0.15:
            topic = rng.choice(sorted(TOPICS))
        lines.append(sentence(rng, TOPICS[topic]))
    return lines


def write_word(path, lines):
    with open(path, "w") as f:
        for s in lines:
            toks = ["<unk>" if w in RARE else w for w in s]
            f.write(" " + " ".join(toks) + " \n")


def write_char(path, lines):
    with open(path, "w") as f:
        for s in lines:
            toks = [w for w in s if w not in RARE]
            f.write(" ".join(toks).replace("N", "9") + "\n")


def main():
    root = os.path.dirname(os.path.abspath(__file__))
    rng = random.Random(20180101)
    os.makedirs(os.path.join(root, "toy_word"), exist_ok=True)
    os.makedirs(os.path.join(root, "toy_char"), exist_ok=True)
    for split, n in [("train", 3000), ("valid", 300), ("test", 300)]:
        write_word(os.path.join(root, "toy_word", split + ".txt"), corpus(rng, n))
    for split, n in [("train", 1500), ("valid", 150), ("test", 150)]:
        write_char(os.path.join(root, "toy_char", split + ".txt"), corpus(rng, n))


if __name__ == "__main__":
    main()
