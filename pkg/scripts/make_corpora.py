"""Regenerate the bundled toy corpora under src/knn_finetune/corpora/.

Output is deterministic; rerunning overwrites the files byte-identically.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "knn_finetune" / "corpora"

SYLLABLES = ["ka", "lo", "mi", "ne", "tu", "ra", "si", "po", "de", "vu", "ba", "ge", "fo", "zi", "hu", "we"]


def pseudo_words(rng, n, taken):
    words = []
    while len(words) < n:
        w = "".join(rng.choice(SYLLABLES, size=rng.integers(2, 4)))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def write_tsv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, text in rows:
            fh.write(f"{label}\t{text}\n")


def cluster_corpus(rng):
    """Four classes, each a union of four sub-clusters.

    A sub-cluster is a pair of word groups (A_i, B_j); its class is
    ``(i + j) % 4``.  Every word group occurs equally often in every class,
    so single words carry no label signal and only their co-occurrence does.
    """
    taken = set()
    group_a = [pseudo_words(rng, 8, taken) for _ in range(4)]
    group_b = [pseudo_words(rng, 8, taken) for _ in range(4)]
    filler = pseudo_words(rng, 120, taken)

    def sample(label):
        i = int(rng.integers(4))
        j = (label - i) % 4
        toks = list(rng.choice(group_a[i], size=int(rng.integers(3, 6))))
        toks += list(rng.choice(group_b[j], size=int(rng.integers(3, 6))))
        toks += list(rng.choice(filler, size=int(rng.integers(4, 9))))
        return " ".join(toks[k] for k in rng.permutation(len(toks)))

    def make(n_per_class):
        rows = [(c, sample(c)) for c in range(4) for _ in range(n_per_class)]
        perm = rng.permutation(len(rows))
        return [rows[i] for i in perm]

    return make(300), make(100)


GENERIC = {
    1: "good great excellent wonderful superb lovely".split(),
    0: "bad awful terrible horrible poor dreadful".split(),
}
ASPECTS = [
    "battery charge power".split(),
    "plot story ending".split(),
    "service staff waiter".split(),
    "room bed bathroom".split(),
]
# adjectives whose polarity depends on the aspect they describe
CONTEXT = "long short quick slow loud quiet".split()
NEUTRAL = """the a this that it was is and with for of very really quite just also we i they
had got found felt seemed after before during then overall honestly""".split()
# meaning-preserving substitutes never used in training
SYNONYMS = {
    "good": ["fine", "decent", "nice"], "great": ["terrific", "fine", "grand"],
    "excellent": ["superior", "stellar", "fine"], "wonderful": ["marvelous", "terrific", "grand"],
    "superb": ["stellar", "superior", "splendid"], "lovely": ["pleasant", "nice", "charming"],
    "bad": ["lousy", "subpar", "lame"], "awful": ["dire", "atrocious", "lousy"],
    "terrible": ["atrocious", "dire", "abysmal"], "horrible": ["ghastly", "abysmal", "dire"],
    "poor": ["subpar", "shoddy", "weak"], "dreadful": ["ghastly", "grim", "lame"],
    "long": ["lengthy", "extended", "prolonged"], "short": ["brief", "limited", "truncated"],
    "quick": ["fast", "rapid", "speedy"], "slow": ["sluggish", "leisurely", "unhurried"],
    "loud": ["noisy", "booming", "blaring"], "quiet": ["silent", "hushed", "calm"],
    "cheap": ["inexpensive", "budget", "low-cost"], "dark": ["dim", "gloomy", "shadowy"],
    "light": ["bright", "airy", "pale"], "small": ["tiny", "compact", "little"],
    "huge": ["enormous", "massive", "vast"], "cold": ["chilly", "cool", "icy"],
}


def sentiment_corpus(rng):
    """Short reviews whose polarity comes mostly from aspect-dependent adjectives.

    Each (aspect, adjective) pair has a fixed polarity, balanced so that every
    adjective is positive for half of the aspects.  A generic polarity word
    appears in a minority of reviews.
    """
    table = np.zeros((len(ASPECTS), len(CONTEXT)), dtype=int)
    for j in range(len(CONTEXT)):
        pos = rng.permutation(len(ASPECTS))[: len(ASPECTS) // 2]
        table[pos, j] = 1

    def sample(label):
        a = int(rng.integers(len(ASPECTS)))
        adjs = np.flatnonzero(table[a] == label)
        toks = list(rng.choice(ASPECTS[a], size=int(rng.integers(2, 4))))
        toks += [str(CONTEXT[j]) for j in rng.choice(adjs, size=int(rng.integers(2, 4)))]
        if rng.random() < 0.5:
            toks.append(rng.choice(GENERIC[label]))
        toks += list(rng.choice(NEUTRAL, size=int(rng.integers(6, 12))))
        return " ".join(str(toks[k]) for k in rng.permutation(len(toks)))

    def make(n_per_class):
        rows = [(c, sample(c)) for c in range(2) for _ in range(n_per_class)]
        perm = rng.permutation(len(rows))
        return [rows[i] for i in perm]

    return make(400), make(100), SYNONYMS


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20211)
    train, test = cluster_corpus(rng)
    write_tsv(OUT / "cluster4_train.tsv", train)
    write_tsv(OUT / "cluster4_test.tsv", test)
    train, test, lexicon = sentiment_corpus(rng)
    write_tsv(OUT / "sentiment_train.tsv", train)
    write_tsv(OUT / "sentiment_test.tsv", test)
    with open(OUT / "sentiment_lexicon.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for w in sorted(lexicon):
            fh.write(f"{w}\t{','.join(lexicon[w])}\n")


if __name__ == "__main__":
    main()
