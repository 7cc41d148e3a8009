import json
import math
import sys


def pick(objects, label):
    matches = [o for o in objects if o["color_label"] == label]
    if not matches:
        return None
    return max(matches, key=lambda o: o["area"])


data = json.load(sys.stdin)
cart = pick(data["objects"], "black")
pole = pick(data["objects"], "tan")
axle = pick(data["objects"], "gray")
features = {
    "cart_position": cart["centroid"][0] / data["image_width"] if cart else None,
    "pole_angle": None,
}
if pole and axle:
    features["pole_angle"] = math.degrees(
        math.atan2(pole["centroid"][0] - axle["centroid"][0], axle["centroid"][1] - pole["centroid"][1])
    )
print(json.dumps({"features": features}))
