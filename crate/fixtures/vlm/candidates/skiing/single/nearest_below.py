import json
import math
import sys

NAMES = [
    "position_of_skier_x",
    "position_of_skier_y",
    "position_of_next_gate_x",
    "position_of_next_gate_y",
    "distance_to_next_gate",
    "position_of_trees_below_skier_x",
    "position_of_trees_below_skier_y",
]


def main():
    frame = json.load(sys.stdin)
    w, h = frame["image_width"], frame["image_height"]
    objs = frame["objects"]
    out = {n: None for n in NAMES}
    skiers = [o for o in objs if o["color_label"] == "red"]
    if skiers:
        skier = max(skiers, key=lambda o: o["area"])
        sx, sy = skier["centroid"]
        out["position_of_skier_x"] = sx / w
        out["position_of_skier_y"] = sy / h
        poles = sorted(
            (o for o in objs if o["color_label"] == "blue" and o["centroid"][1] > sy),
            key=lambda o: o["centroid"][1],
        )
        for a, b in zip(poles, poles[1:]):
            if abs(a["centroid"][1] - b["centroid"][1]) < 3:
                gx = (a["centroid"][0] + b["centroid"][0]) / 2
                gy = (a["centroid"][1] + b["centroid"][1]) / 2
                out["position_of_next_gate_x"] = gx / w
                out["position_of_next_gate_y"] = gy / h
                out["distance_to_next_gate"] = math.hypot((gx - sx) / w, (gy - sy) / h)
                break
        trees = [o for o in objs if o["color_label"] == "dark-green" and o["centroid"][1] > sy]
        if trees:
            tree = min(trees, key=lambda o: o["centroid"][1])
            out["position_of_trees_below_skier_x"] = tree["centroid"][0] / w
            out["position_of_trees_below_skier_y"] = tree["centroid"][1] / h
    print(json.dumps({"features": out}))


main()
