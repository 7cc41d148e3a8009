import json
import math
import sys


def largest(objects, label):
    found = [o for o in objects if o["color_label"] == label]
    return max(found, key=lambda o: o["area"]) if found else None


def main():
    frame = json.load(sys.stdin)
    width = frame["image_width"]
    objects = frame["objects"]
    cart = largest(objects, "black")
    pole = largest(objects, "tan")
    axle = largest(objects, "gray")
    features = {"cart_position": None, "pole_angle": None}
    if cart is not None:
        features["cart_position"] = cart["centroid"][0] / width
    if pole is not None and axle is not None:
        dx = pole["centroid"][0] - axle["centroid"][0]
        dy = axle["centroid"][1] - pole["centroid"][1]
        features["pole_angle"] = math.atan2(dx, dy)
    print(json.dumps({"features": features}))


main()
