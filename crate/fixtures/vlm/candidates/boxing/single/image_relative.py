import json
import math
import sys


def largest_body(objects, label):
    best = None
    for o in objects:
        if o["color_label"] != label or o["bbox"][3] < 12 or o["bbox"][2] >= 40:
            continue
        if not 100 <= o["area"] <= 400:
            continue
        if best is None or o["area"] > best["area"]:
            best = o
    return best


def fist(objects, label):
    return float(any(o["color_label"] == label and o["area"] < 20 and o["bbox"][1] > 16 for o in objects))


frame = json.load(sys.stdin)
w, h = frame["image_width"], frame["image_height"]
objects = frame["objects"]
agent = largest_body(objects, "white")
opp = largest_body(objects, "black")
out = {
    "position_of_agent": agent["centroid"][0] / w if agent else None,
    "position_of_opponent": opp["centroid"][0] / w if opp else None,
    "distance_between_agent_and_opponent": None,
    "agents_fist_position": fist(objects, "white"),
    "opponents_fist_position": fist(objects, "black"),
    "agents_position_relative_to_ring_boundaries": agent["centroid"][0] / w if agent else None,
    "opponents_position_relative_to_ring_boundaries": opp["centroid"][0] / w if opp else None,
}
if agent and opp:
    out["distance_between_agent_and_opponent"] = math.hypot(
        (agent["centroid"][0] - opp["centroid"][0]) / w, (agent["centroid"][1] - opp["centroid"][1]) / h
    )
print(json.dumps({"features": out}))
