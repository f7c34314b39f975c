"""Train a small LeNet-style net on sklearn digits and export the fixture files.

Outputs (in OUT dir):
  digits_net.json / .bin       coreset-network manifest + f32 blob
  digits_eval.json / .bin      coreset-evalset manifest + f32 blob
  conv1_activations.json/.bin  raw post-ReLU conv1 maps for the first 64 eval samples
"""
import argparse
import hashlib
import json
import os

import numpy as np
import torch
import torch.nn as nn
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

p = argparse.ArgumentParser()
p.add_argument("--out", required=True)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--epochs", type=int, default=60)
p.add_argument("--c1", type=int, default=16)
p.add_argument("--c2", type=int, default=32)
p.add_argument("--fc", type=int, default=128)
p.add_argument("--target-rms", type=float, default=1.0,
               help="per-layer weight RMS after power-of-two ReLU rescaling (0 = none)")
args = p.parse_args()

torch.manual_seed(args.seed)
np.random.seed(args.seed)
torch.set_num_threads(1)

digits = load_digits()
X = (digits.images / 16.0).astype(np.float32)[:, None, :, :]
y = digits.target.astype(np.int64)
Xtr, Xev, ytr, yev = train_test_split(X, y, test_size=600, random_state=args.seed, stratify=y)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, args.c1, 3, padding=1)
        self.conv2 = nn.Conv2d(args.c1, args.c2, 3, padding=1)
        self.fc1 = nn.Linear(args.c2 * 4 * 4, args.fc)
        self.fc2 = nn.Linear(args.fc, 10)

    def forward(self, x, tap=False):
        a1 = torch.relu(self.conv1(x))
        h = torch.max_pool2d(a1, 2)
        h = torch.relu(self.conv2(h))
        h = torch.flatten(h, 1)
        h = torch.relu(self.fc1(h))
        out = self.fc2(h)
        return (out, a1) if tap else out


net = Net()
opt = torch.optim.Adam(net.parameters(), lr=2e-3)
xt, yt = torch.from_numpy(Xtr), torch.from_numpy(ytr)
gen = torch.Generator().manual_seed(args.seed)
for epoch in range(args.epochs):
    perm = torch.randperm(len(xt), generator=gen)
    for i in range(0, len(xt), 64):
        idx = perm[i:i + 64]
        opt.zero_grad()
        loss = nn.functional.cross_entropy(net(xt[idx]), yt[idx])
        loss.backward()
        opt.step()

# Positive rescaling of ReLU layers leaves every prediction unchanged. Powers
# of two keep it exact in floating point.
layers = [net.conv1, net.conv2, net.fc1, net.fc2]
cum = 1.0
scales = []
with torch.no_grad():
    for layer in layers:
        w = layer.weight
        if args.target_rms > 0:
            rms = float(w.pow(2).mean().sqrt())
            c = 2.0 ** round(np.log2(args.target_rms / rms))
        else:
            c = 1.0
        w.mul_(c)
        cum *= c
        layer.bias.mul_(cum)
        scales.append(c)

net.eval()
xe = torch.from_numpy(Xev)
with torch.no_grad():
    logits, a1 = net(xe, tap=True)
acc = float((logits.argmax(1).numpy() == yev).mean())
print("eval accuracy", acc, "scales", scales)


def matrix(layer):
    w = layer.weight.detach().numpy()
    w = w.reshape(w.shape[0], -1)
    return np.concatenate([w, layer.bias.detach().numpy()[:, None]], 1).astype("<f4")


os.makedirs(args.out, exist_ok=True)


def write(stem, manifest, blob):
    blob = np.ascontiguousarray(blob, dtype="<f4").tobytes()
    with open(os.path.join(args.out, stem + ".bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(args.out, stem + ".json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return hashlib.sha256(blob).hexdigest()


c1, c2, fc = args.c1, args.c2, args.fc
spec = [
    dict(id="conv1", kind="conv", filters=c1, channels=1, kernel_h=3, kernel_w=3, stride=1, pad=1, inputs=["input"]),
    dict(id="relu1", kind="relu", inputs=["conv1"]),
    dict(id="pool1", kind="maxpool", window=2, stride=2, inputs=["relu1"]),
    dict(id="conv2", kind="conv", filters=c2, channels=c1, kernel_h=3, kernel_w=3, stride=1, pad=1, inputs=["pool1"]),
    dict(id="relu2", kind="relu", inputs=["conv2"]),
    dict(id="flat", kind="flatten", inputs=["relu2"]),
    dict(id="fc1", kind="fc", outputs=fc, input_dim=c2 * 16, inputs=["flat"]),
    dict(id="relu3", kind="relu", inputs=["fc1"]),
    dict(id="fc2", kind="fc", outputs=10, input_dim=fc, inputs=["relu3"]),
]
mats = [matrix(l) for l in layers]
tensors, off = [], 0
for name, m in zip(["conv1", "conv2", "fc1", "fc2"], mats):
    tensors.append(dict(layer=name, shape=list(m.shape), offset=off))
    off += m.size * 4
net_hash = write("digits_net", dict(
    format="coreset-network", version=1, input_shape=[1, 8, 8], layers=spec, tensors=tensors,
    blob="digits_net.bin",
    metadata=dict(
        reference_accuracy=acc,
        dataset="sklearn load_digits, pixel values / 16, stratified 600-sample held-out split",
        seed=args.seed,
        layer_scales=scales,
    )), np.concatenate([m.ravel() for m in mats]))
eval_hash = write("digits_eval", dict(
    format="coreset-evalset", version=1, input_shape=[1, 8, 8], class_count=10,
    labels=[int(v) for v in yev], blob="digits_eval.bin"), Xev)
act = a1[:64].numpy()
act_hash = write("conv1_activations", dict(
    shape=list(act.shape), samples="first 64 evaluation samples", blob="conv1_activations.bin"), act)
print("params", sum(m.size for m in mats))
print("sha256", net_hash, eval_hash, act_hash)
