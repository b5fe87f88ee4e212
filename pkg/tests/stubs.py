import numpy as np


class StubModel:
    """Stands in for a detector: fixed logits, normalised cxcywh boxes and contents."""

    def __init__(self, logits, boxes, contents):
        self.logits = np.asarray(logits, float)[None]
        self.boxes = np.asarray(boxes, float)[None]
        self.contents = np.asarray(contents, float)[None]

    def predict(self, image):
        return self.logits, self.boxes, self.contents


class MovingStub:
    """Returns one box per frame centred on the brightest pixel column / row mass."""

    def __init__(self, content):
        self.content = np.asarray(content, float)

    def predict(self, image):
        img = np.asarray(image, float).sum(-1)
        mask = img > img.mean() + 2 * img.std()
        ys, xs = np.nonzero(mask)
        h, w = img.shape
        box = [(xs.min() + xs.max() + 1) / 2 / w, (ys.min() + ys.max() + 1) / 2 / h,
               (xs.max() - xs.min() + 1) / w, (ys.max() - ys.min() + 1) / h]
        return np.array([[3.0]]), np.array([[box]]), self.content[None, None]
