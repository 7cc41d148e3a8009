import json
import math
import sys


def center(o):
    x, y, bw, bh = o["bbox"]
    return x + bw / 2, y + bh / 2


frame = json.load(sys.stdin)
W = frame["image_width"]
H = frame["image_height"]
objects = frame["objects"]
features = dict.fromkeys([
    "position_of_skier_x", "position_of_skier_y",
    "position_of_next_gate_x", "position_of_next_gate_y",
    "distance_to_next_gate",
    "position_of_trees_below_skier_x", "position_of_trees_below_skier_y",
])
red = [o for o in objects if o["color_label"] == "red"]
if red:
    sx, sy = center(max(red, key=lambda o: o["area"]))
    features["position_of_skier_x"] = sx / W
    features["position_of_skier_y"] = sy / H
    blue = sorted([center(o) for o in objects if o["color_label"] == "blue"], key=lambda c: c[1])
    blue = [c for c in blue if c[1] > sy]
    for i in range(len(blue) - 1):
        if abs(blue[i][1] - blue[i + 1][1]) < 3:
            gx = (blue[i][0] + blue[i + 1][0]) / 2
            gy = blue[i][1]
            features["position_of_next_gate_x"] = gx / W
            features["position_of_next_gate_y"] = gy / H
            features["distance_to_next_gate"] = math.hypot((gx - sx) / W, (gy - sy) / H)
            break
    trees = [center(o) for o in objects if o["color_label"] == "dark-green"]
    trees = [t for t in trees if t[1] > sy]
    if trees:
        tx, ty = min(trees, key=lambda t: t[1])
        features["position_of_trees_below_skier_x"] = tx / W
        features["position_of_trees_below_skier_y"] = ty / H
print(json.dumps({"features": features}))
