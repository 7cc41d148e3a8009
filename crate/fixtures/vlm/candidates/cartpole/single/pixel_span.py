import json
import math
import sys

frame = json.load(sys.stdin)
width = frame["image_width"]
objs = sorted(frame["objects"], key=lambda o: -o["area"])


def first(label):
    for o in objs:
        if o["color_label"] == label:
            return o
    return None


cart = first("black")
pole = first("tan")
pivot = first("gray")
result = {"cart_position": None, "pole_angle": None}
if cart:
    result["cart_position"] = cart["centroid"][0] / (width - 1)
if pole and pivot:
    # tip = contour point farthest from the pivot
    px, py = pivot["centroid"]
    tip = max(pole["contour"], key=lambda p: (p[0] - px) ** 2 + (p[1] - py) ** 2)
    result["pole_angle"] = math.atan2(tip[0] - px, py - tip[1])
print(json.dumps({"features": result}))
