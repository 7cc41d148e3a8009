import json
import sys

frame = json.load(sys.stdin)
w, h = frame["image_width"], frame["image_height"]
objs = frame["objects"]


def topmost(label):
    found = [o for o in objs if o["color_label"] == label]
    return min(found, key=lambda o: (o["bbox"][1], o["bbox"][0])) if found else None


me = topmost("white")
them = topmost("black")
out = {
    "position_of_agent": me["centroid"][0] / w if me else None,
    "position_of_opponent": them["centroid"][0] / w if them else None,
    "distance_between_agent_and_opponent": abs(me["centroid"][0] - them["centroid"][0]) / w if me and them else None,
    "agents_fist_position": 0.0,
    "opponents_fist_position": 0.0,
    "agents_position_relative_to_ring_boundaries": me["centroid"][1] / h if me else None,
    "opponents_position_relative_to_ring_boundaries": them["centroid"][1] / h if them else None,
}
print(json.dumps({"features": out}))
