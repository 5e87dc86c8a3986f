"""Train the toy residual CNN shipped under fixtures/toycnn.

Writes the float model (manifest + blob), a 512-sample test set with labels,
a calibration batch and float64 reference logits for the test set.

    python3 tools/train_toy_fixture.py --out fixtures/toycnn
"""

import argparse
import json
import pathlib
import struct

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

SIZE = 16
CLASSES = 10
NOISE = 1.2


def make_prototypes(rng):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    protos = []
    for _ in range(CLASSES):
        img = np.zeros((SIZE, SIZE))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        protos.append(img / np.abs(img).max())
    return np.stack(protos)


def sample(rng, protos, n):
    labels = rng.integers(0, CLASSES, size=n)
    xs = np.empty((n, 1, SIZE, SIZE))
    for i, c in enumerate(labels):
        img = np.roll(protos[c], rng.integers(-3, 4, size=2), axis=(0, 1))
        img = img * rng.uniform(0.6, 1.4) + rng.normal(0, NOISE, size=img.shape)
        xs[i, 0] = img
    return xs.astype(np.float32), labels.astype(np.int32)


class Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.b2 = nn.BatchNorm2d(cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(cin, cout, 1, stride, 0)
            self.pbn = nn.BatchNorm2d(cout)

    def forward(self, x):
        y = F.relu(self.b1(self.c1(x)))
        y = self.b2(self.c2(y))
        s = x if self.proj is None else self.pbn(self.proj(x))
        return F.relu(y + s)


class ToyNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(1, 8, 3, 1, 1)
        self.sbn = nn.BatchNorm2d(8)
        self.block1 = Block(8, 8, 1)
        self.block2 = Block(8, 16, 2)
        self.block3 = Block(16, 16, 1)
        # Global average pooling as a fixed 8x8 convolution.
        self.gap = nn.Conv2d(16, 16, 8, 1, 0)
        with torch.no_grad():
            self.gap.weight.zero_()
            for c in range(16):
                self.gap.weight[c, c] = 1.0 / 64
            self.gap.bias.zero_()
        self.gap.requires_grad_(False)
        self.fc = nn.Conv2d(16, CLASSES, 1)

    def forward(self, x):
        x = F.relu(self.sbn(self.stem(x)))
        x = self.block3(self.block2(self.block1(x)))
        return self.fc(self.gap(x))


class Exporter:
    def __init__(self):
        self.tensors, self.nodes, self.payload = [], [], bytearray()

    def tensor(self, name, t):
        data = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        self.tensors.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": "f32",
            "offset": len(self.payload),
            "length": data.nbytes,
        })
        self.payload += data.tobytes()
        return name

    def node(self, id_, kind, inputs, **extra):
        self.nodes.append({"id": id_, "kind": kind, "inputs": inputs, **extra})
        return id_

    def conv(self, id_, m, src):
        return self.node(id_, "conv", [src], stride=m.stride[0], padding=m.padding[0], tensors={
            "weight": self.tensor(f"{id_}.weight", m.weight),
            "bias": self.tensor(f"{id_}.bias", m.bias),
        })

    def bn(self, id_, m, src):
        return self.node(id_, "bn", [src], eps=m.eps, tensors={
            "gamma": self.tensor(f"{id_}.gamma", m.weight),
            "beta": self.tensor(f"{id_}.beta", m.bias),
            "mean": self.tensor(f"{id_}.mean", m.running_mean),
            "var": self.tensor(f"{id_}.var", m.running_var),
        })

    def block(self, p, b, src):
        y = self.conv(f"{p}.conv1", b.c1, src)
        y = self.bn(f"{p}.bn1", b.b1, y)
        y = self.node(f"{p}.relu1", "relu", [y])
        y = self.conv(f"{p}.conv2", b.c2, y)
        y = self.bn(f"{p}.bn2", b.b2, y)
        s = src
        if b.proj is not None:
            s = self.conv(f"{p}.proj", b.proj, src)
            s = self.bn(f"{p}.proj_bn", b.pbn, s)
        y = self.node(f"{p}.add", "add", [y, s])
        return self.node(f"{p}.relu2", "relu", [y])

    def write(self, net, out):
        x = self.node("x", "input", [], shape=[1, SIZE, SIZE])
        y = self.conv("stem", net.stem, x)
        y = self.bn("stem.bn", net.sbn, y)
        y = self.node("stem.relu", "relu", [y])
        y = self.block("block1", net.block1, y)
        y = self.block("block2", net.block2, y)
        y = self.block("block3", net.block3, y)
        y = self.conv("gap", net.gap, y)
        y = self.conv("fc", net.fc, y)
        self.node("logits", "output", [y])
        manifest = {"format": "shiftquant-model", "version": 1,
                    "tensors": self.tensors, "nodes": self.nodes}
        (out / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")
        header = b"SQBL" + struct.pack("<IQ", 1, len(self.payload))
        (out / "model.bin").write_bytes(header + bytes(self.payload))


def write_tensor(path, array):
    codes = {np.dtype("float32"): 1, np.dtype("int8"): 2, np.dtype("int32"): 3}
    array = np.ascontiguousarray(array)
    dims = list(array.shape) + [0] * (4 - array.ndim)
    header = b"SQTN" + struct.pack("<BBxx4H", codes[array.dtype], array.ndim, *dims)
    path.write_bytes(header + array.astype(array.dtype.newbyteorder("<")).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("fixtures/toycnn"))
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(7)
    torch.set_num_threads(1)
    rng = np.random.default_rng(2024)
    protos = make_prototypes(rng)
    train_x, train_y = sample(rng, protos, 6000)
    test_x, test_y = sample(rng, protos, 512)
    calib_x, _ = sample(rng, protos, 32)

    net = ToyNet()
    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=3e-3)
    tx, ty = torch.from_numpy(train_x), torch.from_numpy(train_y).long()
    for epoch in range(args.epochs):
        net.train()
        perm = torch.randperm(len(tx))
        for i in range(0, len(tx), 64):
            idx = perm[i:i + 64]
            loss = F.cross_entropy(net(tx[idx]).flatten(1), ty[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            acc = (net(torch.from_numpy(test_x)).flatten(1).argmax(1).numpy() == test_y).mean()
        print(f"epoch {epoch}: loss {loss.item():.4f} test top-1 {acc:.4f}")

    net.eval()
    Exporter().write(net, args.out)
    with torch.no_grad():
        golden = net.double()(torch.from_numpy(test_x).double()).numpy()
    write_tensor(args.out / "test_x.sqt", test_x)
    write_tensor(args.out / "test_y.sqt", test_y)
    write_tensor(args.out / "calib_x.sqt", calib_x)
    write_tensor(args.out / "golden_logits.sqt", golden.astype(np.float32))
    top1 = (golden.reshape(len(golden), -1).argmax(1) == test_y).mean()
    print(f"float64 top-1 {top1:.4f}")


if __name__ == "__main__":
    main()
