"""Regenerates the graph fixtures and the resnet34 partition answer file.

Run from this directory: python3 generate.py
"""

import json


class Builder:
    def __init__(self):
        self.nodes = []
        self.edges = []

    def node(self, id, kind, shape=None):
        n = {"id": id, "kind": kind}
        if shape is not None:
            n["weight_shape"] = list(shape)
        self.nodes.append(n)
        return id

    def edge(self, a, b):
        self.edges.append([a, b])

    def dump(self, path):
        with open(path, "w") as f:
            json.dump({"nodes": self.nodes, "edges": self.edges}, f, indent=1)
            f.write("\n")


def resnet34():
    b = Builder()
    x = b.node("input", "input")
    c1 = b.node("conv1", "conv", (3, 3, 3, 64))
    b.edge(x, c1)
    prev, ch = c1, 64
    for s, (blocks, width) in enumerate([(3, 64), (4, 128), (6, 256), (3, 512)], start=1):
        for k in range(blocks):
            name = f"layer{s}.{k}"
            src = prev
            if s > 1 and k == 0:
                # Spatial downsampling happens in a pool ahead of the block.
                src = b.node(f"{name}.pool", "pool")
                b.edge(prev, src)
            ca = b.node(f"{name}.conv_a", "conv", (3, 3, ch, width))
            cb = b.node(f"{name}.conv_b", "conv", (3, 3, width, width))
            add = b.node(f"{name}.add", "add")
            b.edge(src, ca)
            b.edge(ca, cb)
            b.edge(cb, add)
            if ch != width:
                ds = b.node(f"{name}.downsample", "conv", (1, 1, ch, width))
                b.edge(src, ds)
                b.edge(ds, add)
            else:
                b.edge(src, add)
            prev, ch = add, width
    pool = b.node("avgpool", "pool")
    fc = b.node("fc", "fc", (1, 1, 512, 10))
    out = b.node("output", "output")
    b.edge(prev, pool)
    b.edge(pool, fc)
    b.edge(fc, out)
    return b


def darts7(c=16, cells=7):
    b = Builder()
    x = b.node("input", "input")
    stem = b.node("stem", "conv", (3, 3, 3, c))
    b.edge(x, stem)
    reductions = {cells // 3, 2 * cells // 3}
    # (node id, channels, resolution level)
    s0 = s1 = (stem, c, 0)
    for i in range(cells):
        red = i in reductions
        level = s1[2] + (1 if red else 0)
        pre = []
        for j, (src, ch, lvl) in enumerate((s0, s1)):
            while lvl < level:
                p = b.node(f"cell{i}.pool{j}_{lvl}", "pool")
                b.edge(src, p)
                src, lvl = p, lvl + 1
            conv = b.node(f"cell{i}.pre{j}", "conv", (1, 1, ch, c))
            b.edge(src, conv)
            pre.append(conv)
        p0, p1 = pre
        states = {"s0": p0, "s1": p1}

        def op(name, src, k=3):
            conv = b.node(f"cell{i}.{name}", "conv", (k, k, c, c))
            b.edge(states[src], conv)
            return conv

        def add(name, *inputs):
            n = b.node(f"cell{i}.{name}", "add")
            for src in inputs:
                b.edge(src, n)
            states[name] = n
            return n

        if red:
            add("n0", op("op0", "s0"), op("op1", "s1"))
            add("n1", op("op2", "n0"), states["s1"])
            add("n2", op("op3", "s0"), states["n0"])
            add("n3", op("op4", "n1"), op("op5", "n2"))
        else:
            add("n0", op("op0", "s0"), op("op1", "s1"))
            add("n1", op("op2", "s0"), op("op3", "s1", 1))
            add("n2", op("op4", "s1"), states["s0"])
            add("n3", op("op5", "n0"), states["s1"])
        cat = b.node(f"cell{i}.concat", "concat")
        for n in ("n0", "n1", "n2", "n3"):
            b.edge(states[n], cat)
        s0, s1 = s1, (cat, 4 * c, level)
    pool = b.node("global_pool", "pool")
    fc = b.node("classifier", "fc", (1, 1, 4 * c, 10))
    out = b.node("output", "output")
    b.edge(s1[0], pool)
    b.edge(pool, fc)
    b.edge(fc, out)
    return b


def fig3_mini():
    b = Builder()
    x = b.node("input", "input")
    c1 = b.node("conv1", "conv", (3, 3, 1, 8))
    c2 = b.node("conv2", "conv", (3, 3, 8, 8))
    add = b.node("add", "add")
    c3 = b.node("conv3", "conv", (3, 3, 8, 8))
    pool = b.node("pool", "pool")
    fc = b.node("fc", "fc", (1, 1, 8, 2))
    out = b.node("output", "output")
    for e in [(x, c1), (c1, c2), (c2, add), (c1, add), (add, c3), (c3, pool), (pool, fc), (fc, out)]:
        b.edge(*e)
    return b


def partition(b):
    """Union-find over the pairwise channel constraints of a concat-free graph."""
    kind = {n["id"]: n["kind"] for n in b.nodes}
    weighted = {i for i, k in kind.items() if k in ("conv", "fc")}
    parent = {}

    def find(a):
        parent.setdefault(a, a)
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, c):
        parent[find(a)] = find(c)

    for i in weighted:
        find(i + ".in")
        find(i + ".out")
    for u, v in b.edges:
        assert kind[v] != "concat"
        src = u + ".out" if u in weighted else "signal:" + u
        dst = v + ".in" if v in weighted else "signal:" + v
        if kind[v] != "input":
            union(src, dst)
    classes = {}
    for item in list(parent):
        if not item.startswith("signal:"):
            classes.setdefault(find(item), []).append(item)
    return sorted(sorted(c) for c in classes.values())


if __name__ == "__main__":
    r = resnet34()
    r.dump("resnet34.json")
    darts7().dump("darts7.json")
    fig3_mini().dump("fig3_mini.json")
    with open("resnet34.partition.json", "w") as f:
        json.dump({"groups": partition(r)}, f, indent=1)
        f.write("\n")
    print(sum(1 for n in r.nodes if n["kind"] in ("conv", "fc")), "weighted layers in resnet34")
    print(len(partition(r)), "resnet34 groups")
