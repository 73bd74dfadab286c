import os

import pytest
from hypothesis import HealthCheck, settings

from bytesleuth.pe import make_minimal_pe, parse_pe, replace_section

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def fixture_bytes() -> bytes:
    return make_minimal_pe(0)


@pytest.fixture
def image(fixture_bytes):
    return parse_pe(fixture_bytes)


FAIL_VA = 0x402A4E


def fail_image():
    """A fixture whose ``.data`` holds the string ``fail`` at VA 0x402A4E."""
    img = parse_pe(make_minimal_pe(7, section_units=(2, 8, 1)))
    data = img.sections[1]
    rel = FAIL_VA - img.image_base - data.virtual_address
    body = bytearray(data.body)
    body[rel:rel + 4] = b"fail"
    return replace_section(img, 1, body=bytes(body)), data.raw_offset + rel


@pytest.fixture
def fail_case():
    return fail_image()
