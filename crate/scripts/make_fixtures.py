#!/usr/bin/env python3
"""Regenerates the test fixtures under crates/core/tests/data.

Output is a pure function of SEED, so rerunning the script leaves the
checked-in files unchanged. The script also writes an independent reference
ranking of the top-K tags (oracle_vocabulary.tsv) computed here from the
fixture contents, which the Rust tests compare against.
"""

import json
import math
import random
from pathlib import Path

SEED = 20240917
K = 50
OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data"

HEAD_TAGS = """
speech male female music ambience outdoor indoor traffic car engine rain wind
water birds dog bark crowd applause laughter footsteps door knock guitar piano
drums bass synth vocal singing electronic acoustic reverb echo distortion
low_fidelity field_recording hum hiss static radio television kitchen cafe
street city park forest night morning thunder storm ocean waves river train
horn siren bell clock typing keyboard phone ringtone baby cough breathing
whisper shouting conversation narration podcast news sports stadium
""".split()

TAIL_TAGS = [f"{a}-{b}" for a in ("tin", "brass", "glass", "paper", "rubber", "wooden")
             for b in ("clatter", "scrape", "rattle", "squeak", "thud", "buzz")]

SCENES = ["a busy street", "a quiet kitchen", "a small cafe", "an open field",
          "a train platform", "a home studio", "a forest trail", "a crowded stadium"]
TEXTURES = ["close and dry", "distant and reverberant", "slightly muffled",
            "bright with a narrow stereo image", "noisy with a steady hum"]
EVENTS = ["a short burst", "a steady pattern", "an irregular sequence",
          "a slow fade", "two overlapping layers"]


def zipf_weights(n, s=1.1):
    return [1.0 / (i + 1) ** s for i in range(n)]


def draw_tags(rng):
    n = rng.randint(5, 10)
    weights = zipf_weights(len(HEAD_TAGS))
    tags = []
    while len(tags) < n:
        t = rng.choices(HEAD_TAGS, weights)[0]
        if t not in tags:
            tags.append(t)
    if rng.random() < 0.35:
        t = rng.choice(TAIL_TAGS)
        if t not in tags:
            tags.append(t)
    return tags


def caption_for(rng, tags, single_newlines):
    words = ", ".join(t.replace("_", " ") for t in tags)
    paras = [
        f"The recording opens in {rng.choice(SCENES)}. The sound is {rng.choice(TEXTURES)}.",
        f"Over the next seconds there is {rng.choice(EVENTS)} that includes {words}.",
    ]
    if rng.random() < 0.5:
        paras.append(f"Later the mix shifts toward {rng.choice(EVENTS)} and the level drops.")
    paras.append(f"In summary, a clip of {rng.choice(SCENES)} featuring {words}.")
    return ("\n" if single_newlines else "\n\n").join(paras)


def fence(body, rng):
    lang = rng.choice(["json", "JSON", ""])
    return f"```{lang}\n{body}\n```"


def build_corpus(rng):
    records, responses, truth = [], [], {}
    special = {
        3: "missing",
        11: "empty",
        17: "retry",
        29: "retry",
        41: "bad",
        50: "many",
        63: "few",
    }
    for i, idx in enumerate([5, 23, 37, 58, 77]):
        special[idx] = f"rare{i}"
    pretagged = {8, 19, 34, 47, 66, 71, 82, 90, 95, 99}

    for i in range(100):
        rid = f"clip-{i:04d}"
        kind = special.get(i, "plain")
        if kind.startswith("rare"):
            n = int(kind[4:])
            tags = [f"rare{n}-{j}" for j in range(rng.randint(2, 4))]
        elif kind == "many":
            tags = HEAD_TAGS[:18]
        elif kind == "few":
            tags = draw_tags(rng)[:3]
        else:
            tags = draw_tags(rng)
        rec = {"id": rid, "caption": caption_for(rng, tags, single_newlines=i % 9 == 4)}
        if i % 4 == 0:
            rec["duration_seconds"] = round(rng.uniform(4.0, 30.0), 2)
        if i in pretagged:
            rec["tags"] = tags
            truth[rid] = tags
            records.append(rec)
            continue
        records.append(rec)

        body = json.dumps({"labels": tags})
        if kind == "missing":
            continue
        if kind == "empty":
            responses.append((rid, json.dumps({"labels": ["two words", "a sentence here", "!!"]})))
            continue
        if kind == "bad":
            for _ in range(3):
                responses.append((rid, "Here are the labels: dog, bark"))
            continue
        if kind == "retry":
            responses.append((rid, "I think the labels are: " + ", ".join(tags)))
            responses.append((rid, body))
            truth[rid] = tags
            continue

        style = rng.random()
        if style < 0.2:
            raw = fence(body, rng)
        elif style < 0.35:
            raw = json.dumps({"labels": [t.upper() for t in tags]})
        elif style < 0.5:
            noisy = list(tags)
            noisy.insert(rng.randrange(len(noisy) + 1), "background noise")
            noisy.append(tags[0])
            raw = json.dumps({"labels": noisy})
        else:
            raw = body
        responses.append((rid, raw))
        truth[rid] = tags[:16]
    return records, responses, truth


def oracle_vocabulary(truth, n_records, k):
    df = {}
    for tags in truth.values():
        for t in set(tags):
            df[t] = df.get(t, 0) + 1
    rows = []
    for t, d in df.items():
        score = d * math.log((n_records + 1) / (d + 1))
        rows.append((-score, -d, t, d, score))
    rows.sort()
    return [(t, d, s) for _, _, t, d, s in rows[:k]]


ADVERSARIAL = [
    ("plain", '{"labels": ["rain", "thunder"]}', ["rain", "thunder"]),
    ("fenced_json", '```json\n{"labels": ["rain"]}\n```', ["rain"]),
    ("fenced_bare", '```\n{"labels": ["dog", "bark"]}\n```', ["dog", "bark"]),
    ("fenced_upper_lang", '```JSON\n{"labels": ["wind"]}\n```', ["wind"]),
    ("fence_no_close", '```json\n{"labels": ["rain"]}', ["rain"]),
    ("uppercase", '{"labels": ["DOG", "Bark", "RaIn"]}', ["dog", "bark", "rain"]),
    ("whitespace_padding", '  \n {"labels": ["  guitar ", "\\tpiano"]}  \n', ["guitar", "piano"]),
    ("multiword_rejected", '{"labels": ["Dog", "bark", "dog", "indoor noise"]}', ["dog", "bark"]),
    ("duplicates", '{"labels": ["rain", "rain", "RAIN", "wind", "rain"]}', ["rain", "wind"]),
    ("hyphen_underscore", '{"labels": ["low_fidelity", "field-recording", "lo-fi"]}',
     ["low_fidelity", "field-recording", "lo-fi"]),
    ("edge_punctuation", '{"labels": ["-dog", "cat-", "_x", "bird", "a.b", "c,d"]}', ["bird"]),
    ("digits", '{"labels": ["808", "tr909", "2000s"]}', ["808", "tr909", "2000s"]),
    ("non_string_items", '{"labels": ["music", 7, null, true, {"x": 1}, ["y"]]}', ["music"]),
    ("extra_keys", '{"reason": "ok", "labels": ["speech"], "score": 0.9}', ["speech"]),
    ("long_music_list", '{"labels": ["music","electronic","house","acid","drum","bass","synth","vocal","production","nostalgia"]}',
     ["music", "electronic", "house", "acid", "drum", "bass", "synth", "vocal", "production", "nostalgia"]),
    ("truncate_17", json.dumps({"labels": [f"t{i}" for i in range(17)]}), [f"t{i}" for i in range(16)]),
    ("unicode_rejected", '{"labels": ["café", "ambience", "über"]}', ["ambience"]),
    ("empty_strings", '{"labels": ["", "  ", "hum"]}', ["hum"]),
    ("not_json_prose", "Sure! The labels are dog, bark and rain.", "invalid_json"),
    ("empty_response", "   ", "invalid_json"),
    ("truncated_json", '{"labels": ["dog", "bark"', "invalid_json"),
    ("trailing_text", '{"labels": ["dog"]} Hope this helps!', "invalid_json"),
    ("single_quotes", "{'labels': ['dog']}", "invalid_json"),
    ("fenced_prose", "```\nno json here\n```", "invalid_json"),
    ("missing_key", '{"tags": ["dog", "bark"]}', "missing_labels"),
    ("labels_not_list", '{"labels": "dog, bark"}', "missing_labels"),
    ("top_level_list", '["dog", "bark"]', "missing_labels"),
    ("all_multiword", '{"labels": ["dog barking", "heavy rain"]}', "empty_after_validation"),
    ("empty_list", '{"labels": []}', "empty_after_validation"),
    ("all_invalid_types", '{"labels": [1, 2.5, false]}', "empty_after_validation"),
]


def loss_bundle():
    return [
        {"objective": "bce", "logits": [[0.0, 0.0]], "targets": [[1.0, 0.0]]},
        {"objective": "bce", "logits": [[1.5, -0.5, 0.25], [-2.0, 0.75, 3.0]],
         "targets": [[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]},
        {"objective": "infonce", "audio": [[1.0, 0.0], [0.0, 1.0]], "text": [[1.0, 0.0], [0.0, 1.0]], "tau": 1.0},
        {"objective": "infonce", "audio": [[0.3, -1.2, 0.5], [2.0, 0.1, -0.4], [-0.7, 0.9, 1.1]],
         "text": [[0.2, -1.0, 0.6], [1.5, 0.3, -0.2], [-0.4, 1.2, 0.8]]},
        {"objective": "nll", "logits": [[0.0, 0.0, 0.0, 0.0]] * 3, "targets": [0, 1, 2]},
        {"objective": "nll", "logits": [[math.log(9.0), 0.0]], "targets": [0]},
        {"objective": "mixed_caption", "ar_losses": [1.0, 2.0], "par_losses": [0.5] * 6},
        {"objective": "mtl", "lambda": 0.2,
         "mtc": {"objective": "bce", "logits": [[0.5, -0.5]], "targets": [[1.0, 0.0]]},
         "gen": {"objective": "nll", "logits": [[0.1, 0.2, 0.3]], "targets": [2]}},
    ]


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def main():
    rng = random.Random(SEED)
    OUT.mkdir(parents=True, exist_ok=True)
    records, responses, truth = build_corpus(rng)
    write_jsonl(OUT / "corpus.jsonl", records)
    write_jsonl(OUT / "llm_responses.jsonl", [{"id": i, "response": r} for i, r in responses])

    vocab = oracle_vocabulary(truth, len(truth), K)
    with open(OUT / "oracle_vocabulary.tsv", "w", newline="\n") as f:
        f.write(f"# n_records={len(truth)} k={len(vocab)}\n")
        f.write("index\ttag\tdf\tscore\n")
        for i, (t, d, s) in enumerate(vocab):
            f.write(f"{i}\t{t}\t{d}\t{s:.9f}\n")

    suite = []
    for name, raw, expect in ADVERSARIAL:
        case = {"name": name, "response": raw}
        if isinstance(expect, list):
            case["tags"] = expect
        else:
            case["error"] = expect
        suite.append(case)
    assert len(suite) == 30
    with open(OUT / "adversarial_responses.json", "w", newline="\n") as f:
        json.dump(suite, f, indent=2, ensure_ascii=False)
        f.write("\n")

    with open(OUT / "loss_bundle.json", "w", newline="\n") as f:
        json.dump(loss_bundle(), f, indent=2)
        f.write("\n")

    with open(OUT / "pipeline.toml", "w", newline="\n") as f:
        f.write(
            f"""workdir = "work"
corpus = "corpus.jsonl"
k = {K}
seed = 7
jobs = 4

[parser]
endpoint_url = "fixture"
fixture_path = "llm_responses.jsonl"
max_retries = 3

[losses]
input = "loss_bundle.json"
"""
        )


if __name__ == "__main__":
    main()
