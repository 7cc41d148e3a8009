import json
import math
import sys

frame = json.load(sys.stdin)
w = frame["image_width"]
objs = frame["objects"]
agent = next((o for o in objs if o["color_label"] == "red"), None)
opponent = next((o for o in objs if o["color_label"] == "blue"), None)
out = {
    "position_of_agent": agent["centroid"][0] / w if agent else None,
    "position_of_opponent": opponent["centroid"][0] / w if opponent else None,
    "distance_between_agent_and_opponent": None,
    "agents_fist_position": 0.0,
    "opponents_fist_position": 0.0,
    "agents_position_relative_to_ring_boundaries": None,
    "opponents_position_relative_to_ring_boundaries": None,
}
if agent and opponent:
    out["distance_between_agent_and_opponent"] = math.dist(agent["centroid"], opponent["centroid"]) / w
print(json.dumps({"features": out}))
