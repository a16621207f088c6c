"""Models, coefficients and frozen oracle values shared by the tests."""
from thinhomog.cell import CoefficientSet
from thinhomog.geometry import GeometryModel

CHANNEL_F = "2 + sin(2*pi*x1) - y2^2*(1 + 0.5*cos(2*pi*y1))"
FLAT_F = "1 - y2^2"
LAYERED_F = "0.25 - y2^2"
OSC_F = "1 + 0.5*cos(2*pi*y1) - abs(y2)"

CHANNEL_COEFFS = dict(a11="2 + cos(2*pi*y1)", a12="0.25*sin(2*pi*y1)",
                   a22="1.5 + 0.5*x1*sin(2*pi*y1)", c="1 + 0.5*cos(2*pi*y1)", f="1 + x1")
LAYERED_COEFFS = dict(a11="2 + cos(2*pi*y1)", a22="2 + cos(2*pi*y1)", c="1", f="1")
UNIT_COEFFS = dict(c="1", f="1")

CORPUS_EXPRESSIONS = (
    CHANNEL_F, FLAT_F, LAYERED_F, OSC_F,
    *CHANNEL_COEFFS.values(), *LAYERED_COEFFS.values(),
    "1 - x1^2", "cos(pi*x1/2) * (1 + x2^2)", "exp(x1) * cos(x2)",
)

# adaptive scipy.integrate.quad of the closed-form thickness
# 2 sqrt((2 + sin 2 pi x1) / (1 + 0.5 cos 2 pi y1)), tolerance 1e-14
BOX_CHANNEL_X0 = 2.982996749265318
BOX_CHANNEL_X03 = 3.623485649544755
INT_BOX_CHANNEL = 5.866615861352518
# adaptive quad of 2 (1 + 0.5 cos(2 pi x1 / 0.1)) (1 - x1^2) over (-1, 1)
OSC_MU_EPS_01 = 2.6656534548302426


def channel():
    return GeometryModel.from_text(CHANNEL_F, 1.0)


def flat():
    return GeometryModel.from_text(FLAT_F, 1.0)


def layered():
    return GeometryModel.from_text(LAYERED_F, 1.0)


def oscillating():
    return GeometryModel.from_text(OSC_F, 1.0)


def channel_coeffs():
    return CoefficientSet.from_strings(**CHANNEL_COEFFS)


def layered_coeffs():
    return CoefficientSet.from_strings(**LAYERED_COEFFS)


def unit_coeffs():
    return CoefficientSet.from_strings(**UNIT_COEFFS)


def corpus_cases():
    """(name, model, coefficients) for every corpus problem."""
    return [("channel", channel(), channel_coeffs()), ("flat", flat(), unit_coeffs()),
            ("layered", layered(), layered_coeffs()),
            ("oscillating", oscillating(), unit_coeffs())]
