import json
import math
import sys

SCORE_BAND = 16


def bodies(objs, label):
    return [
        o for o in objs
        if o["color_label"] == label and 100 <= o["area"] <= 400 and o["bbox"][3] >= 12 and o["bbox"][2] < 40
    ]


def fist_out(objs, label):
    return any(o["color_label"] == label and o["area"] < 20 and o["bbox"][1] > SCORE_BAND for o in objs)


def main():
    frame = json.load(sys.stdin)
    w, h = frame["image_width"], frame["image_height"]
    objs = frame["objects"]
    out = {
        "position_of_agent": None,
        "position_of_opponent": None,
        "distance_between_agent_and_opponent": None,
        "agents_fist_position": 1.0 if fist_out(objs, "white") else 0.0,
        "opponents_fist_position": 1.0 if fist_out(objs, "black") else 0.0,
        "agents_position_relative_to_ring_boundaries": None,
        "opponents_position_relative_to_ring_boundaries": None,
    }
    me = max(bodies(objs, "white"), key=lambda o: o["area"], default=None)
    them = max(bodies(objs, "black"), key=lambda o: o["area"], default=None)
    ropes = [o for o in objs if o["bbox"][2] > 60 and o["bbox"][3] > 60]
    ring = max(ropes, key=lambda o: o["area"])["bbox"] if ropes else None
    if me:
        out["position_of_agent"] = me["centroid"][0] / w
    if them:
        out["position_of_opponent"] = them["centroid"][0] / w
    if me and them:
        out["distance_between_agent_and_opponent"] = math.hypot(
            (me["centroid"][0] - them["centroid"][0]) / w, (me["centroid"][1] - them["centroid"][1]) / h
        )
    if ring:
        rx, _, rw, _ = ring
        if me:
            out["agents_position_relative_to_ring_boundaries"] = (me["centroid"][0] - rx) / rw
        if them:
            out["opponents_position_relative_to_ring_boundaries"] = (them["centroid"][0] - rx) / rw
    print(json.dumps({"features": out}))


main()
