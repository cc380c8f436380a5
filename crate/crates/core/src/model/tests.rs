use super::*;

fn ids(n: usize, vocab: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + salt * 13 + 3) % vocab).collect()
}

fn enc_len(c: &ModelConfig, n: usize) -> usize {
    if c.family == Family::Mixer {
        c.n_enc_fixed
    } else {
        n
    }
}

#[test]
fn vanilla_base_parameter_count() {
    let c = ModelConfig::new(Family::Transformer, 12, 3072, 768, 64, 12, 32128);
    let arch = Architecture::build(&c).unwrap();
    assert_eq!(arch.param_count(), 222_903_552);
}

#[test]
fn sharing_decouples_params_from_depth() {
    let counts: Vec<u64> = (2..=4)
        .map(|r| {
            let mut c = ModelConfig::new(Family::Universal, 4, 512, 128, 32, 4, 1000);
            c.n_recur = r;
            Architecture::build(&c).unwrap().param_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    let a = Architecture::build(&ModelConfig::new(Family::Albert, 6, 512, 128, 32, 4, 1000)).unwrap();
    let b = Architecture::build(&ModelConfig::new(Family::Albert, 12, 512, 128, 32, 4, 1000)).unwrap();
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn every_family_produces_vocab_logits() {
    for fam in Family::ALL {
        let c = tiny_config(fam);
        let m = Model::<f64>::build(&c, 1).unwrap();
        assert_eq!(m.live_param_count(), m.arch.param_count());
        for n_dec in [1, 4] {
            let out = m.logits(&ids(enc_len(&c, 6), c.vocab, 0), &ids(n_dec, c.vocab, 1)).unwrap();
            assert_eq!(out.shape(), &[n_dec, c.vocab], "{fam}");
            assert!(out.is_finite());
        }
    }
}

#[test]
fn out_of_range_ids_are_input_errors() {
    let c = tiny_config(Family::Transformer);
    let m = Model::<f64>::build(&c, 1).unwrap();
    assert!(matches!(m.logits(&[0, c.vocab], &[1]), Err(Error::Input(_))));
    assert!(matches!(m.logits(&[0], &[]), Err(Error::Input(_))));
}

#[test]
fn mixer_rejects_unpadded_encoder_input() {
    let c = tiny_config(Family::Mixer);
    let m = Model::<f64>::build(&c, 1).unwrap();
    assert!(matches!(m.logits(&[1, 2, 3], &[1]), Err(Error::Contract(_))));
}

#[test]
fn decoder_is_causal_for_every_family() {
    let n = 8;
    for fam in Family::ALL {
        let c = tiny_config(fam);
        let m = Model::<f64>::build(&c, 2).unwrap();
        let enc = ids(enc_len(&c, n), c.vocab, 2);
        let dec = ids(n, c.vocab, 3);
        let base = m.logits(&enc, &dec).unwrap();
        for t in 0..n {
            let mut pert = dec.clone();
            pert[t] = (pert[t] + 5) % c.vocab;
            let out = m.logits(&enc, &pert).unwrap();
            for i in 0..n {
                let same = base.row(i) == out.row(i);
                if i < t {
                    assert!(same, "{fam}: position {i} changed after perturbing {t}");
                }
            }
            assert_ne!(base.row(t), out.row(t), "{fam}: position {t} ignored its own token");
        }
    }
}

#[test]
fn funnel_output_length_follows_pool_schedule() {
    let mut c = tiny_config(Family::Funnel);
    c.n_layers_enc = 6;
    let arch = Architecture::build(&c).unwrap();
    let p = arch.layout.materialize::<f64>(3);
    for (n, want) in [(8, 2), (9, 3), (5, 2), (1, 1)] {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &p);
        let f = arch.forward(&mut cx, &ids(n, c.vocab, 0), &[1, 2]).unwrap();
        assert_eq!(f.enc_out_len, want, "n={n}");
    }
    assert_eq!(c.funnel_pools(), 2);
}

#[test]
fn neutralized_glu_matches_gelu_vanilla() {
    let cg = tiny_config(Family::Glu);
    let mut glu = Model::<f64>::build(&cg, 4).unwrap();
    glu.arch.set_unit_gate(true);
    let mut cv = tiny_config(Family::Transformer);
    cv.ffn_activation = Activation::Gelu;
    let mut van = Model::<f64>::build(&cv, 5).unwrap();
    let names: Vec<String> = van.arch.layout.specs().iter().map(|s| s.name.clone()).collect();
    for name in names {
        van.set(&name, glu.get(&name).unwrap().clone()).unwrap();
    }
    let enc = ids(6, cg.vocab, 1);
    let dec = ids(5, cg.vocab, 2);
    assert_eq!(glu.logits(&enc, &dec).unwrap(), van.logits(&enc, &dec).unwrap());
}

#[test]
fn switch_with_identical_experts_matches_scaled_vanilla() {
    let mut cs = tiny_config(Family::Switch);
    cs.n_experts = 4;
    cs.capacity_factor = 4.0;
    let mut sw = Model::<f64>::build(&cs, 6).unwrap();
    let cv = tiny_config(Family::Transformer);
    let mut van = Model::<f64>::build(&cv, 7).unwrap();
    let names: Vec<String> = van.arch.layout.specs().iter().map(|s| s.name.clone()).collect();
    for name in names {
        match sw.get(&name) {
            Some(t) => {
                let t = t.clone();
                van.set(&name, t).unwrap();
            }
            None => {
                // dense FFN of a mixture layer: every expert gets these weights
                let (prefix, leaf) = name.rsplit_once('.').unwrap();
                let w = van.get(&name).unwrap().clone();
                for e in 0..4 {
                    sw.set(&format!("{prefix}.expert{e}.{leaf}"), w.clone()).unwrap();
                }
                let zeros = Tensor::zeros(sw.get(&format!("{prefix}.router")).unwrap().shape().to_vec());
                sw.set(&format!("{prefix}.router"), zeros).unwrap();
                if leaf == "wo" {
                    van.set(&name, w.map(|v| v * 0.25)).unwrap();
                }
            }
        }
    }
    let enc = ids(6, cs.vocab, 3);
    let dec = ids(5, cs.vocab, 4);
    let a = sw.logits(&enc, &dec).unwrap();
    let b = van.logits(&enc, &dec).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max diff {diff:e}");
}

#[test]
fn initial_loss_is_near_uniform() {
    for fam in Family::ALL {
        let mut c = tiny_config(fam);
        c.vocab = 259;
        let m = Model::<f64>::build(&c, 8).unwrap();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &m.params);
        let enc = ids(enc_len(&c, 6), c.vocab, 5);
        let dec = ids(8, c.vocab, 6);
        let tgt = ids(8, c.vocab, 7);
        let l = m.arch.loss(&mut cx, &enc, &dec, &tgt).unwrap();
        let ce = g.value(l.cross_entropy).item();
        let uniform = (259f64).ln();
        assert!((ce - uniform).abs() / uniform < 0.05, "{fam}: {ce} vs {uniform}");
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let c = tiny_config(Family::Switch);
    let m = Model::<f32>::build(&c, 9).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), "12".to_string());
    let ck = Checkpoint { model: m.clone(), metadata: meta.clone() };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ck).unwrap();
    assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
    let back: Checkpoint<f32> = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.model.params, m.params);
    assert_eq!(back.model.config(), m.config());
    assert_eq!(back.metadata, meta);
    let wide: Checkpoint<f64> = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(wide.model.params[0].data()[0], m.params[0].data()[0] as f64);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::Format(_))));
    assert!(matches!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    let mut extra = buf.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint::<f32, _>(&extra[..]), Err(Error::Format(_))));
}

#[test]
fn gradcheck_passes_for_every_family() {
    for fam in Family::ALL {
        let r = gradcheck(&tiny_config(fam), &GradcheckOptions::default()).unwrap();
        assert!(r.passed, "{fam}: {:?}", r);
        assert!(r.checked > 0);
    }
}

#[test]
fn gradcheck_is_repeatable() {
    let opts = GradcheckOptions { seed: 3, ..Default::default() };
    let a = gradcheck(&tiny_config(Family::Performer), &opts).unwrap();
    let b = gradcheck(&tiny_config(Family::Performer), &opts).unwrap();
    assert_eq!(a.max_rel_err, b.max_rel_err);
    assert_eq!(a.worst_param, b.worst_param);
}
