import json
import math
import sys


def main():
    frame = json.load(sys.stdin)
    w = frame["image_width"]
    carts = [o for o in frame["objects"] if o["color_label"] == "black"]
    poles = [o for o in frame["objects"] if o["color_label"] == "tan"]
    axles = [o for o in frame["objects"] if o["color_label"] == "gray"]
    out = {"cart_position": None, "pole_angle": None}
    if carts:
        x, y, bw, bh = max(carts, key=lambda o: o["area"])["bbox"]
        out["cart_position"] = (x + bw / 2) / w
    if poles and axles:
        pole = max(poles, key=lambda o: o["area"])
        axle = max(axles, key=lambda o: o["area"])
        dx = pole["centroid"][0] - axle["centroid"][0]
        dy = axle["centroid"][1] - pole["centroid"][1]
        out["pole_angle"] = math.atan2(dx, dy)
    print(json.dumps({"features": out}))


if __name__ == "__main__":
    main()
