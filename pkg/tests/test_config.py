import dataclasses

import pytest

from ivx.config import PipelineConfig, apply_overrides, dump_config, load_config
from ivx.errors import ConfigError


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestDefaults:
    def test_reference_setup(self):
        cfg = PipelineConfig()
        assert cfg.frontend.frame_len == 256
        assert cfg.frontend.n_ceps == 12
        assert cfg.ubm.components == 64
        assert cfg.tv.rank == 400
        assert cfg.sae.layers == (200, 40)
        assert cfg.sae.learning_rate == 0.01 and cfg.sae.batch_size == 32
        assert (cfg.sae.pretrain_epochs, cfg.sae.epochs) == (100, 200)

    def test_defaults_validate_with_corpus(self):
        cfg = PipelineConfig()
        cfg.corpus.synthesize = True
        cfg.validate()

    def test_needs_corpus_source(self):
        with pytest.raises(ConfigError, match="manifest"):
            PipelineConfig().validate()


class TestValidation:
    @pytest.mark.parametrize("override, match", [
        ({"tv.rank": "1000"}, "C\\*D"),
        ({"frontend.n_ceps": "26"}, "n_mels"),
        ({"ubm.components": "0"}, "positive"),
        ({"sae.layers": "300,400"}, "strictly decrease"),
        ({"sae.layers": "500"}, "strictly decrease"),
        ({"tv.mstep": "exact"}, "mstep"),
        ({"classifier.kind": "forest"}, "kind"),
        ({"task.task": "ranking"}, "task"),
        ({"frontend.preemphasis": "1.0"}, "preemphasis"),
    ])
    def test_rejected(self, override, match):
        cfg = apply_overrides(PipelineConfig(), {"corpus.synthesize": "true", **override})
        with pytest.raises(ConfigError, match=match):
            cfg.validate()

    def test_rank_at_limit_accepted(self):
        cfg = apply_overrides(PipelineConfig(), {"corpus.synthesize": "true", "ubm.components": "4",
                                                 "tv.rank": "48", "sae.layers": "20,8"})
        cfg.validate()


class TestOverrides:
    def test_types(self):
        cfg = apply_overrides(PipelineConfig(), {"corpus.cross_channel": "yes", "ubm.tol": "1e-3",
                                                 "sae.layers": "30, 10", "tv.mstep": "paper-literal"})
        assert cfg.corpus.cross_channel is True
        assert cfg.ubm.tol == 1e-3
        assert cfg.sae.layers == (30, 10)
        assert cfg.tv.mstep == "paper-literal"

    def test_workdir(self):
        assert apply_overrides(PipelineConfig(), {"workdir": "/x"}).workdir == "/x"

    @pytest.mark.parametrize("override", [{"nope.key": "1"}, {"ubm.nope": "1"}, {"ubm.components": "many"},
                                          {"corpus.synthesize": "maybe"}])
    def test_bad(self, override):
        with pytest.raises(ConfigError):
            apply_overrides(PipelineConfig(), override)


class TestLoadConfig:
    def test_sections_and_implicit_top(self, tmp_path):
        path = _write(tmp_path, "workdir = out\n\n[corpus]\nsynthesize = true\n\n[ubm]\ncomponents = 16\n"
                                "[tv]\nrank = 50\n[sae]\nlayers = 32,8\n")
        cfg = load_config(path)
        assert cfg.workdir == str(tmp_path / "out")
        assert cfg.ubm.components == 16 and cfg.tv.rank == 50 and cfg.sae.layers == (32, 8)

    def test_relative_manifest(self, tmp_path):
        cfg = load_config(_write(tmp_path, "[corpus]\nmanifest = data/manifest.csv\n"))
        assert cfg.corpus.manifest == str(tmp_path / "data" / "manifest.csv")

    def test_overrides_win(self, tmp_path):
        path = _write(tmp_path, "[corpus]\nsynthesize = true\n[ubm]\ncomponents = 16\n[tv]\nrank = 50\n"
                                "[sae]\nlayers = 20,8\n")
        assert load_config(path, {"ubm.components": "8"}).ubm.components == 8

    def test_rejected_before_use(self, tmp_path):
        path = _write(tmp_path, "[corpus]\nsynthesize = true\n[ubm]\ncomponents = 2\n[tv]\nrank = 400\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.ini")
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, "[corpus\nsynthesize = true\n"))

    def test_seed_env(self, tmp_path, monkeypatch):
        path = _write(tmp_path, "[corpus]\nsynthesize = true\n")
        monkeypatch.setenv("IVX_SEED", "1234")
        cfg = load_config(path)
        seeds = [getattr(cfg, s).seed for s in PipelineConfig.SECTIONS if hasattr(getattr(cfg, s), "seed")]
        assert seeds and all(s == 1234 for s in seeds)
        monkeypatch.setenv("IVX_SEED", "abc")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_dump_round_trip(self, tmp_path):
        cfg = apply_overrides(PipelineConfig(), {"corpus.synthesize": "true", "sae.layers": "100,20",
                                                 "ubm.tol": "0.001", "workdir": str(tmp_path / "w")})
        back = load_config(_write(tmp_path, dump_config(cfg)))
        assert back.to_dict() == cfg.to_dict()
        assert back.hash() == cfg.hash()


class TestHash:
    def test_stable(self):
        assert PipelineConfig().hash() == PipelineConfig().hash()

    def test_paths_excluded(self):
        a = apply_overrides(PipelineConfig(), {"corpus.manifest": "/a/m.csv", "workdir": "/a"})
        b = apply_overrides(PipelineConfig(), {"corpus.manifest": "/b/m.csv", "workdir": "/b"})
        assert a.hash() == b.hash()

    def test_every_field_changes_hash(self):
        base = PipelineConfig()
        ref = base.hash()
        for name in PipelineConfig.SECTIONS:
            for f in dataclasses.fields(getattr(base, name)):
                if f.name == "manifest":
                    continue
                cfg = PipelineConfig()
                sec = getattr(cfg, name)
                value = getattr(sec, f.name)
                if isinstance(value, bool):
                    new = not value
                elif isinstance(value, (int, float)):
                    new = value + 1
                elif isinstance(value, tuple):
                    new = value + (1,)
                else:
                    new = value + "x"
                setattr(sec, f.name, new)
                assert cfg.hash() != ref, f"{name}.{f.name}"
