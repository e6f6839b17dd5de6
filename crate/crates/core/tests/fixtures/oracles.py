"""One-off reference computations whose outputs are frozen into unit tests.

Independent of the Rust code: regex tokenization and exhaustive n-gram
enumeration straight from the textbook definitions.
"""
import json, math, re
from collections import Counter

def tok(s):
    return re.findall(r"\w+|[^\w\s]", s.lower())

def bleu(c, r):
    if not c or not r:
        return 0.0
    logs = 0.0
    for n in range(1, 5):
        cg = Counter(tuple(c[i:i+n]) for i in range(len(c)-n+1))
        rg = Counter(tuple(r[i:i+n]) for i in range(len(r)-n+1))
        m = sum(min(v, rg[g]) for g, v in cg.items())
        t = max(len(c)-n+1, 0)
        if n == 1:
            if m == 0:
                return 0.0
            p = m / t
        else:
            p = (m + 1) / (t + 1)
        logs += math.log(p) / 4
    bp = 1.0 if len(c) >= len(r) else math.exp(1 - len(r)/len(c))
    return bp * math.exp(logs)

print("paragraph tokens", len(tok(open("paragraph.txt").read())))
docs = [json.loads(l) for l in open("docs.jsonl")]
print("chunk10 passages", sum(math.ceil(len(tok(d["body"]))/10) for d in docs))
print("bleu cat/mat", repr(bleu("the cat sat on the mat".split(), "the cat is on the mat".split())))
gold = tok("the show was headlined by the british rock group coldplay .")
cands = ["the super bowl took place in santa clara .",
         "it was headlined by the british rock group coldplay .",
         "beyonce and bruno mars also performed ."]
print("provenance", [repr(bleu(gold, tok(c))) for c in cands])

def bm25(docs, query, k1=1.2, b=0.75):
    toks = [d.split() for d in docs]
    n = len(toks)
    avg = sum(map(len, toks)) / n
    out = []
    for d in toks:
        s = 0.0
        for t in dict.fromkeys(query.split()):
            df = sum(t in x for x in toks)
            tf = d.count(t)
            if tf == 0:
                continue
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(d) / avg))
        out.append(s)
    return out

bm25_docs = ["the cat sat on the mat", "the dog sat", "cats and dogs", "a cat a cat a cat"]
print("bm25 'the cat'", [repr(s) for s in bm25(bm25_docs, "the cat")])
print("bm25 'sat dog dog'", [repr(s) for s in bm25(bm25_docs, "sat dog dog")])
