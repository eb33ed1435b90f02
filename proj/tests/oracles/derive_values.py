"""High-precision derivation of the frozen expected values used by the C++ tests.

Independent of the C++ implementation: plain mpmath arithmetic only.
"""
from mpmath import mp, mpf, exp, log

mp.dps = 40


def softmax(z, t=1):
    e = [exp(mpf(v) / t) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kl(ref, approx):
    return sum(r * log(r / a) for r, a in zip(ref, approx) if r > 0)


def kd(student, teacher, label, alpha, t):
    q = softmax(teacher, t)
    p = softmax(student, t)
    ce = -log(softmax(student)[label])
    return alpha * kl(q, p) * t * t + (1 - alpha) * ce, kl(q, p), ce


print("log_softmax([2,0])", [log(v) for v in softmax([2, 0])])
print("softmax_T([2,0],2)", softmax([2, 0], 2))
print("KL(.5,.5||.9,.1)", kl([mpf("0.5"), mpf("0.5")], [mpf("0.9"), mpf("0.1")]))
print("KL(.9,.1||.5,.5)", kl([mpf("0.9"), mpf("0.1")], [mpf("0.5"), mpf("0.5")]))
print("CE([2,0],1)", -log(softmax([2, 0])[1]))
loss, klv, ce = kd([1, 0], [2, 0], 0, mpf("0.5"), 2)
print("kd example", loss, "kl", klv, "kl*T^2", klv * 4, "ce", ce)

tp, fp, fn, tn = 8, 2, 1, 9
p = mpf(tp) / (tp + fp)
r = mpf(tp) / (tp + fn)
s = mpf(tn) / (tn + fp)
print("metrics", p, r, s, 2 * p * r / (p + r), mpf(tp + tn) / 20, (s + r) / 2)
print("normalize 128", mpf(128) / 255)

t1 = [[0.978, 0.978, 0.978, 0.978, 0.978, 0.978],
      [0.989, 0.978, 1.000, 1.000, 0.988, 1.000],
      [1.000, 1.000, 1.000, 1.000, 1.000, 1.000],
      [0.989, 0.978, 1.000, 1.000, 0.988, 1.000],
      [1.000, 1.000, 1.000, 1.000, 1.000, 1.000]]
t3 = [[0.974, 0.976, 0.976, 0.976, 0.972, 0.976],
      [1.000, 1.000, 1.000, 1.000, 1.000, 1.000],
      [0.978, 0.978, 1.000, 1.000, 0.992, 1.000],
      [1.000, 1.000, 1.000, 1.000, 1.000, 1.000],
      [0.989, 0.978, 1.000, 1.000, 0.988, 1.000]]
for name, t in (("table1", t1), ("table3", t3)):
    print(name, "mean", [sum(mpf(str(row[c])) for row in t) / 5 for c in range(6)])
print("reduction", (mpf(2334966) - 49222390) / 49222390 * 100)

# round-robin fold sizes for 103 items split 61/42 with k=5
def rr(n, k):
    return [n // k + (1 if i < n % k else 0) for i in range(k)]
