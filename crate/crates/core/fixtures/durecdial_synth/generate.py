"""Writes a small synthetic corpus in the DuRecDial 2.0 line format and the
example counts expected after `derive-labels,first-positive`.

The counting here is a separate implementation used as a test oracle; it
shares no code with the Rust pipeline.

    python3 generate.py   # rewrites train/dev/test.jsonl and expected.json
"""
import json
import random
from pathlib import Path

HERE = Path(__file__).parent
GOALS_CHAT = ["Greetings", "Chat about stars", "Q&A", "Ask about weather", "Say goodbye"]
GOALS_REC = ["Movie recommendation", "Music recommendation", "Food recommendation", "POI recommendation"]
USER_LINES = ["Hi there.", "Do you know any good films?", "I like pop songs.", "What should I eat tonight?",
              "Tell me about that star.", "Sounds nice.", "Thanks a lot.", "Is it raining today?"]
SYS_LINES = ["Hello! How are you?", "You might enjoy this one.", "Here is a song you could try.",
             "That restaurant is popular.", "She is a famous actress.", "Glad to help.", "It is sunny today."]


def conversation(rng, idx):
    n_goals = rng.randint(2, 5)
    goals = [rng.choice(GOALS_CHAT + GOALS_REC) for _ in range(n_goals)]
    goals[0] = "Greetings"
    topics = []
    for g in goals:
        topics += [g] * rng.randint(1, 4)
    first = rng.choice(["user", "bot"])
    speakers = [(first if i % 2 == 0 else ("bot" if first == "user" else "user")) for i in range(len(topics))]
    if "bot" not in speakers:
        topics.append(topics[-1])
        speakers.append("bot" if speakers[-1] == "user" else "user")
    lines = []
    for i, s in enumerate(speakers):
        text = rng.choice(USER_LINES if s == "user" else SYS_LINES)
        if rng.random() < 0.2:
            text = f"[{rng.randint(1, 9)}] {text}"
        lines.append(text)
    rec = {"id": f"synth-{idx:03d}", "conversation": lines, "goal_type_list": topics,
           "user_profile": {"Name": f"user{idx}", "Age Range": "18-25"},
           "situation": rng.choice(["Sunday morning", "At home", "Evening"])}
    if first == "bot" or rng.random() < 0.5:
        rec["first_speaker"] = first
    return rec


def expected(records):
    """Examples per split after topic labeling and first-positive retention."""
    total, positives = 0, 0
    for r in records:
        first = r.get("first_speaker", "user")
        prev_topic, seen_pos = None, False
        for i, topic in enumerate(r["goal_type_list"]):
            is_system = (i % 2 == 0) == (first == "bot")
            if not is_system:
                continue
            label = int("recommendation" in topic.lower())
            if topic != prev_topic:
                prev_topic, seen_pos = topic, False
            if label:
                if seen_pos:
                    continue
                seen_pos = True
            total += 1
            positives += label
    return total, positives


def main():
    rng = random.Random(2024)
    convs = [conversation(rng, i) for i in range(50)]
    parts = {"train": convs[:40], "dev": convs[40:45], "test": convs[45:]}
    out = {"conversations": 50, "splits": {}}
    all_n, all_pos = 0, 0
    for name, recs in parts.items():
        with open(HERE / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for r in recs:
                f.write(json.dumps(r, ensure_ascii=False) + "\n")
        n, pos = expected(recs)
        out["splits"][name] = {"conversations": len(recs), "examples": n, "positives": pos}
        all_n += n
        all_pos += pos
    out["positives"] = all_pos
    out["examples"] = all_n
    out["positive_ratio"] = all_pos / all_n
    (HERE / "expected.json").write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
