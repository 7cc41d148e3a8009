import json
import sys


def delta(before, after):
    if before is None or after is None:
        return None
    return after - before


data = json.load(sys.stdin)
first, second = data["single"]
print(json.dumps({"features": {
    "cart_velocity": delta(first["cart_position"], second["cart_position"]),
    "pole_angular_velocity": delta(first["pole_angle"], second["pole_angle"]),
}}))
