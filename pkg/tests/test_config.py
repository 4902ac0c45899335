import pytest

from reflectloop.config import CONFIG_ENV_VAR, ConfigError, load_config
from reflectloop.loop import GroundingFailurePolicy
from reflectloop.mocks import ScriptedChatBackend
from reflectloop.pipeline import Domain
from reflectloop.protocol import Color, Shape
from reflectloop.render import Point


def write(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    cfg = load_config()
    assert cfg.loop.max_rounds == 5
    assert cfg.pipeline.rho == 0.75
    assert cfg.backends_spec is None


def test_backends_required_error(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    with pytest.raises(ConfigError):
        load_config().make_backends()


def test_env_var_fallback(tmp_path, monkeypatch):
    path = write(tmp_path, "loop:\n  max_rounds: 2\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
    assert load_config().loop.max_rounds == 2


def test_explicit_path_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV_VAR, str(tmp_path / "missing.yaml"))
    path = write(tmp_path, "loop:\n  max_rounds: 3\n")
    assert load_config(path).loop.max_rounds == 3


def test_scripted_backends(tmp_path):
    path = write(
        tmp_path,
        """
backends:
  kind: scripted
  chat_script: ["hello"]
  teacher_script: ["феедбак"]
  grounder_fixtures:
    the mug: [[0.4, 0.6]]
  judge_scores: [3, 10]
  segmenter:
    side: 4
loop:
  max_rounds: 2
  on_empty_grounding: terminate
pipeline:
  rho: 0.5
  marker_shape: box
  dense_domains: [ocr]
""",
    )
    cfg = load_config(path)
    assert cfg.loop.max_rounds == 2
    assert cfg.loop.on_empty_grounding is GroundingFailurePolicy.TERMINATE
    assert cfg.pipeline.rho == 0.5
    assert cfg.pipeline.marker_shape is Shape.BOX
    assert cfg.pipeline.dense_domains == frozenset({Domain.OCR})
    backends = cfg.make_backends()
    assert isinstance(backends.chat, ScriptedChatBackend)
    assert backends.grounder.ground(b"x", "the mug") == [Point(0.4, 0.6)]
    assert backends.teacher().complete([]) == "феедбак"


def test_http_backends_built(tmp_path):
    path = write(
        tmp_path,
        """
backends:
  chat_url: http://c/v1/chat
  grounder_url: http://g
  segmenter_url: http://s
  judge_url: http://j
  model: my-vlm
""",
    )
    backends = load_config(path).make_backends()
    assert backends.chat._model == "my-vlm"


def test_missing_url_rejected(tmp_path):
    path = write(tmp_path, "backends:\n  chat_url: http://c\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "grounder_url" in str(exc.value)


def test_unknown_top_level_key(tmp_path):
    path = write(tmp_path, "loops:\n  max_rounds: 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_bad_enum_value_names_options(tmp_path):
    path = write(tmp_path, "loop:\n  on_empty_grounding: explode\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "feedback" in str(exc.value) and "terminate" in str(exc.value)


def test_color_cycle_parsed(tmp_path):
    path = write(tmp_path, "loop:\n  color_cycle: [red, cyan]\n")
    assert load_config(path).loop.color_cycle == (Color.RED, Color.CYAN)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_unparseable_yaml(tmp_path):
    path = write(tmp_path, "loop: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_backend_kind(tmp_path):
    path = write(tmp_path, "backends:\n  kind: carrier-pigeon\n")
    with pytest.raises(ConfigError):
        load_config(path)
