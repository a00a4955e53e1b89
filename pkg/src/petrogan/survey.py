"""Real-vs-generated survey harness and the downstream classifier probe.

A survey form pairs one real image with one generated image per item; the
side holding the real image is randomized and stored only in a separate
answer key, never in the form. Scoring never folds "not sure" into the
correct/incorrect rates; the three are reported side by side.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .images import load_image, save_image, to_native
from .latent import render
from .optim import AdamState, adam_step
from .rng import stream

BACKGROUNDS = ("undergraduate", "postgraduate", "researcher", "industry", "other")
ANSWERS = ("left", "right", "not_sure")
FORM_VERSION = 1


class SurveyError(ValueError):
    pass


class MalformedResponseError(SurveyError):
    pass


@dataclass
class SurveyItem:
    item_id: str
    left: str
    right: str


@dataclass
class SurveyForm:
    items: list[SurveyItem]

    def to_dict(self) -> dict:
        return {"version": FORM_VERSION,
                "items": [vars(i).copy() for i in self.items]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SurveyForm":
        return cls(items=[SurveyItem(**i) for i in doc["items"]])


@dataclass
class SurveyKey:
    items: list[dict]  # {item_id, real_side, fake_seed, real_source}

    def to_dict(self) -> dict:
        return {"version": FORM_VERSION, "items": [i.copy() for i in self.items]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SurveyKey":
        return cls(items=list(doc["items"]))


@dataclass
class SurveyResponse:
    respondent: str
    background: str
    answers: list[str]

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise MalformedResponseError(
                f"background {self.background!r} not in {BACKGROUNDS}")
        for a in self.answers:
            if a not in ANSWERS:
                raise MalformedResponseError(f"answer {a!r} not in {ANSWERS}")


def build_survey(real_pool: list, generator, w_avg, n: int, psi: float = 0.7,
                 seed: int = 0, out_dir=None) -> tuple[SurveyForm, SurveyKey]:
    """Assemble n two-image items: one real (sampled without replacement)
    against one generated at the given truncation, sides randomized.

    ``real_pool`` is a list of image paths or a directory. Fully
    deterministic for a fixed seed, including the generated pixels.
    """
    if isinstance(real_pool, (str, Path)):
        real_pool = sorted(str(p) for p in Path(real_pool).iterdir()
                           if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(real_pool) < n:
        raise SurveyError(f"real pool has {len(real_pool)} images, need {n}")
    out_dir = Path(out_dir) if out_dir else None
    pick = stream(seed, "survey-reals").choice(len(real_pool), size=n, replace=False)
    fake_seeds = stream(seed, "survey-fake-seeds").integers(0, 2 ** 31, size=n)
    fake_left = stream(seed, "survey-sides").random(n) < 0.5

    items, key_items = [], []
    for i in range(n):
        real_path = str(real_pool[int(pick[i])])
        fake_seed = int(fake_seeds[i])
        item_id = f"item{i:03d}"
        if out_dir is not None:
            fake_img, _ = render(generator, w_avg, seed=fake_seed, psi=psi)
            left_path = str(out_dir / f"{item_id}_A.png")
            right_path = str(out_dir / f"{item_id}_B.png")
            real_img = load_image(real_path)
            if fake_left[i]:
                save_image(fake_img, left_path)
                save_image(real_img, right_path)
            else:
                save_image(real_img, left_path)
                save_image(fake_img, right_path)
        else:
            left_path = f"{item_id}_A"
            right_path = f"{item_id}_B"
        items.append(SurveyItem(item_id=item_id, left=left_path, right=right_path))
        key_items.append({"item_id": item_id,
                          "real_side": "right" if fake_left[i] else "left",
                          "fake_seed": fake_seed,
                          "real_source": real_path})
    form, key = SurveyForm(items=items), SurveyKey(items=key_items)
    if out_dir is not None:
        (out_dir / "form.json").write_text(json.dumps(form.to_dict(), indent=1))
        (out_dir / "key.json").write_text(json.dumps(key.to_dict(), indent=1))
    return form, key


@dataclass
class GroupScore:
    responses: int = 0
    correct_pct: float = 0.0
    incorrect_pct: float = 0.0
    not_sure_pct: float = 0.0


@dataclass
class ScoreReport:
    overall: GroupScore
    by_background: dict[str, GroupScore]
    item_difficulty: dict[str, float]  # fraction of answers picking the fake

    def to_dict(self) -> dict:
        return {"overall": vars(self.overall).copy(),
                "by_background": {k: vars(v).copy()
                                  for k, v in self.by_background.items()},
                "item_difficulty": dict(self.item_difficulty)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["group", "responses", "correct_pct", "incorrect_pct",
                    "not_sure_pct"])
        w.writerow(["overall", self.overall.responses,
                    f"{self.overall.correct_pct:.4f}",
                    f"{self.overall.incorrect_pct:.4f}",
                    f"{self.overall.not_sure_pct:.4f}"])
        for name, g in sorted(self.by_background.items()):
            w.writerow([name, g.responses, f"{g.correct_pct:.4f}",
                        f"{g.incorrect_pct:.4f}", f"{g.not_sure_pct:.4f}"])
        return buf.getvalue()


def _tally(responses: list[SurveyResponse], key: SurveyKey) -> GroupScore:
    total = correct = incorrect = unsure = 0
    for resp in responses:
        for answer, key_item in zip(resp.answers, key.items):
            total += 1
            if answer == "not_sure":
                unsure += 1
            elif answer == key_item["real_side"]:
                correct += 1
            else:
                incorrect += 1
    if total == 0:
        return GroupScore()
    return GroupScore(responses=len(responses),
                      correct_pct=100.0 * correct / total,
                      incorrect_pct=100.0 * incorrect / total,
                      not_sure_pct=100.0 * unsure / total)


def score(responses: list[SurveyResponse], key: SurveyKey) -> ScoreReport:
    """Tally correct / incorrect / not-sure rates, grouped by background."""
    n_items = len(key.items)
    for resp in responses:
        if len(resp.answers) != n_items:
            raise MalformedResponseError(
                f"respondent {resp.respondent!r} answered {len(resp.answers)} "
                f"items, key has {n_items}")
    by_bg = {}
    for bg in BACKGROUNDS:
        group = [r for r in responses if r.background == bg]
        if group:
            by_bg[bg] = _tally(group, key)
    difficulty = {}
    for j, key_item in enumerate(key.items):
        wrong = sum(1 for r in responses
                    if r.answers[j] not in ("not_sure", key_item["real_side"]))
        difficulty[key_item["item_id"]] = (wrong / len(responses)) if responses else 0.0
    return ScoreReport(overall=_tally(responses, key), by_background=by_bg,
                       item_difficulty=difficulty)


def responses_from_csv(text: str) -> list[SurveyResponse]:
    """Parse the response log format: respondent,background,item,answer."""
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0][:2] == ["respondent", "background"]:
        rows = rows[1:]
    grouped: dict[str, dict] = {}
    for row in rows:
        if not row:
            continue
        if len(row) != 4:
            raise MalformedResponseError(f"expected 4 columns, got {row}")
        rid, bg, item, answer = row
        entry = grouped.setdefault(rid, {"background": bg, "answers": {}})
        entry["answers"][item] = answer
    out = []
    for rid, entry in grouped.items():
        answers = [entry["answers"][k] for k in sorted(entry["answers"])]
        out.append(SurveyResponse(respondent=rid, background=entry["background"],
                                  answers=answers))
    return out


# ---------------------------------------------------------------------------
# downstream classifier probe

class InsufficientDataError(SurveyError):
    pass


@dataclass
class ClassifierConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-3
    test_fraction: float = 0.2
    seed: int = 0
    channels: tuple = (16, 32, 64)


@dataclass
class ClassifierMetrics:
    train_accuracy: float
    test_accuracy: float
    holdout_accuracy: float | None
    split_seed: int
    epochs: int


class _SmallConvNet:
    """Three conv blocks, global average pool, scalar logit head."""

    def __init__(self, channels: tuple, seed: int):
        rng = stream(seed, "classifier-init")
        self.params: dict[str, Var] = {}
        cin = 3
        for i, cout in enumerate(channels):
            std = np.sqrt(2.0 / (cin * 9))
            self.params[f"c{i}.w"] = Var(
                (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32),
                track=True)
            self.params[f"c{i}.b"] = Var(np.zeros(cout, dtype=np.float32), track=True)
            cin = cout
        self.params["head.w"] = Var(
            (rng.standard_normal((cin, 1)) / np.sqrt(cin)).astype(np.float32),
            track=True)
        self.params["head.b"] = Var(np.zeros(1, dtype=np.float32), track=True)
        self.n_blocks = len(channels)

    def forward(self, x: Var) -> Var:
        for i in range(self.n_blocks):
            x = ad.conv2d(x, self.params[f"c{i}.w"])
            x = ad.add(x, ad.reshape(self.params[f"c{i}.b"], (1, -1, 1, 1)))
            x = ad.leaky_relu(x, 0.2)
            x = ad.avgpool2x(x)
        x = ad.reduce_mean(x, axis=(2, 3))
        return ad.add(ad.matmul(x, self.params["head.w"]), self.params["head.b"])

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(Var(batch)).value.ravel()


def _split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    # permutation keyed by (seed, n): equal-sized classes split identically,
    # so paired control corpora travel together
    perm = stream(seed, "split", n).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return perm[n_test:], perm[:n_test]


def _accuracy(net: _SmallConvNet, x: np.ndarray, y: np.ndarray,
              batch: int = 64) -> float:
    hits = 0
    for i in range(0, len(x), batch):
        logits = net.logits(x[i:i + batch])
        hits += int(((logits > 0) == (y[i:i + batch] > 0.5)).sum())
    return hits / len(x)


def classifier_experiment(class_a, class_b, holdout=None,
                          config: ClassifierConfig | None = None) -> ClassifierMetrics:
    """Train a small binary conv classifier between two image sets.

    ``class_a`` gets label 1, ``class_b`` label 0. ``holdout`` is an optional
    third set evaluated against label 1 (transfer check). Images are [0,1]
    HWC arrays of one common size.
    """
    config = config or ClassifierConfig()
    a = [np.asarray(im, dtype=np.float32) for im in class_a]
    b = [np.asarray(im, dtype=np.float32) for im in class_b]
    if len(a) < 10 or len(b) < 10:
        raise InsufficientDataError(
            f"each class needs >= 10 images, got {len(a)} and {len(b)}")
    xa = np.stack([to_native(im) for im in a])
    xb = np.stack([to_native(im) for im in b])
    tr_a, te_a = _split(len(a), config.test_fraction, config.seed)
    tr_b, te_b = _split(len(b), config.test_fraction, config.seed)
    x_train = np.concatenate([xa[tr_a], xb[tr_b]])
    y_train = np.concatenate([np.ones(len(tr_a)), np.zeros(len(tr_b))]).astype(np.float32)
    x_test = np.concatenate([xa[te_a], xb[te_b]])
    y_test = np.concatenate([np.ones(len(te_a)), np.zeros(len(te_b))]).astype(np.float32)

    net = _SmallConvNet(config.channels, config.seed)
    opt = AdamState(learning_rate=config.learning_rate, beta1=0.9, beta2=0.999)
    order_rng = stream(config.seed, "classifier-epochs")
    names = list(net.params)
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(len(x_train))
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb_, yb = x_train[idx], y_train[idx]
            with Tape() as tape:
                logits = net.forward(ad.leaf(xb_, track=False))
                # softplus(s) - y*s == logistic loss for labels {0,1}
                loss = ad.reduce_mean(ad.sub(ad.softplus(logits),
                                             ad.mul(logits, yb.reshape(-1, 1))))
                grads = tape.gradient(loss, [net.params[n] for n in names])
            adam_step(opt, net.params, dict(zip(names, grads)))

    holdout_acc = None
    if holdout is not None:
        h = np.stack([to_native(np.asarray(im, dtype=np.float32)) for im in holdout])
        holdout_acc = _accuracy(net, h, np.ones(len(h), dtype=np.float32))
    return ClassifierMetrics(
        train_accuracy=_accuracy(net, x_train, y_train),
        test_accuracy=_accuracy(net, x_test, y_test),
        holdout_accuracy=holdout_acc,
        split_seed=config.seed,
        epochs=config.epochs)
