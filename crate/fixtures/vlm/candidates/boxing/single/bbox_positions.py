import json
import math
import sys

frame = json.load(sys.stdin)
W, H = frame["image_width"], frame["image_height"]
objs = frame["objects"]


def boxer(label):
    cands = [o for o in objs if o["color_label"] == label and 100 <= o["area"] <= 400 and o["bbox"][3] >= 12 and o["bbox"][2] < 40]
    if not cands:
        return None
    x, y, bw, bh = max(cands, key=lambda o: o["area"])["bbox"]
    return (x + bw / 2, y + bh / 2)


def extended(label):
    return 1.0 if any(o["color_label"] == label and o["area"] < 20 and o["bbox"][1] > 16 for o in objs) else 0.0


agent = boxer("white")
opponent = boxer("black")
ring = [o["bbox"] for o in objs if o["bbox"][2] > 60 and o["bbox"][3] > 60]
features = {
    "position_of_agent": agent[0] / W if agent else None,
    "position_of_opponent": opponent[0] / W if opponent else None,
    "distance_between_agent_and_opponent": None,
    "agents_fist_position": extended("white"),
    "opponents_fist_position": extended("black"),
    "agents_position_relative_to_ring_boundaries": None,
    "opponents_position_relative_to_ring_boundaries": None,
}
if agent and opponent:
    features["distance_between_agent_and_opponent"] = math.hypot((agent[0] - opponent[0]) / W, (agent[1] - opponent[1]) / H)
if ring:
    rx, ry, rw, rh = ring[0]
    if agent:
        features["agents_position_relative_to_ring_boundaries"] = (agent[0] - rx) / rw
    if opponent:
        features["opponents_position_relative_to_ring_boundaries"] = (opponent[0] - rx) / rw
print(json.dumps({"features": features}))
