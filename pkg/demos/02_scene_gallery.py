"""A look inside the synthetic scene generator.

Renders a few multi-view scenes, prints their annotations, and saves the
view images as PPM files under demos/out/gallery/.
"""

import os

from multiabn.dataset import (
    GenConfig,
    check_unique,
    generate_scene,
    make_references,
    parse_instruction,
    write_ppm,
)

OUT = os.path.join(os.path.dirname(__file__), "out", "gallery")
os.makedirs(OUT, exist_ok=True)

config = GenConfig()
for seed in (11, 12, 13):
    scene = generate_scene(seed, config)
    target = scene.objects[scene.target_id]
    source = scene.sources[scene.source_id]
    print(f"== scene seed {seed} ==")
    print(f"views: {len(scene.images)}  image: {scene.images[0].shape}")
    print(f"objects ({len(scene.objects)}):")
    for i, obj in enumerate(scene.objects):
        marker = " <- target" if i == scene.target_id else ""
        region = scene.sources[obj.region]
        print(f"  {obj.size} {obj.color} {obj.shape} on {region.phrase}{marker}")
    print(f"fetch from: {source.phrase}")

    refs = make_references(scene, seed, config)
    for ref in refs:
        parsed = parse_instruction(ref)
        ok = check_unique(scene, ref)
        print(f"  ref ({len(ref.split())} words, unique={ok}): {ref}")
        print(f"    parsed target attrs: size={parsed.size} color={parsed.color}"
              f" shape={parsed.shape} side={parsed.side} landmark={parsed.landmark}")

    for j, image in enumerate(scene.images, start=1):
        path = os.path.join(OUT, f"scene{seed}_view{j}.ppm")
        write_ppm(path, image)
    print(f"saved {len(scene.images)} views to {OUT}/scene{seed}_view*.ppm")
    print()

print("Views of one scene shift and sometimes mirror the camera, so relations")
print("like 'left of' only survive annotation when they hold in every view.")
