import json
import sys

frame = json.load(sys.stdin)
w, h = frame["image_width"], frame["image_height"]
names = [
    "position_of_skier_x", "position_of_skier_y", "position_of_next_gate_x", "position_of_next_gate_y",
    "distance_to_next_gate", "position_of_trees_below_skier_x", "position_of_trees_below_skier_y",
]
out = dict.fromkeys(names, 0.0)
for o in frame["objects"]:
    if o["color_label"] == "red":
        out["position_of_skier_x"] = o["centroid"][0] / w
        out["position_of_skier_y"] = o["centroid"][1] / h
print({"features": out})
