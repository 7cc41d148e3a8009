import json
import sys

frame = json.load(sys.stdin)
w, h = frame["image_width"], frame["image_height"]
out = {
    "position_of_skier_x": None,
    "position_of_skier_y": None,
    "position_of_next_gate_x": None,
    "position_of_next_gate_y": None,
    "distance_to_next_gate": None,
    "position_of_trees_below_skier_x": None,
    "position_of_trees_below_skier_y": None,
}
skier = [o for o in frame["objects"] if o["color_label"] == "orange"]
if skier:
    out["position_of_skier_x"] = skier[0]["centroid"][0] / w
    out["position_of_skier_y"] = skier[0]["centroid"][1] / h
print(json.dumps({"features": out}))
