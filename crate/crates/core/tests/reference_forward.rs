mod common;

use common::*;
use recid_core::backbone::*;

fn prefix(cfg: PrefixConfig, b: &EncoderBackbone, seed: u64, scale: f64) -> PrefixParams {
    let mut pp = PrefixParams::new(&cfg, b, seed).unwrap();
    for v in &mut pp.vectors {
        v.mapv_inplace(|x| x * scale);
    }
    pp
}

fn slots(pp: &PrefixParams, layers: usize) -> Vec<Option<Rows>> {
    let mut out = vec![None; layers];
    for (l, m) in pp.inject_layers.iter().zip(&pp.vectors) {
        out[*l] = Some(to_rows(m));
    }
    out
}

#[test]
fn plain_forward_matches_scalar_reference() {
    let b = tiny_backbone(TINY_DEFAULT_SEED);
    for ids in [vec![2u32, 25, 3], vec![2, 12, 7, 26, 33, 4, 3], vec![5]] {
        let got = b.forward_plain(&ids).unwrap();
        let want = reference_forward(b.net(), &ids);
        assert!(max_rel_err(&got, &want) < 1e-10, "{ids:?}");
    }
}

#[test]
fn prefix_forward_matches_scalar_reference() {
    let b = tiny_backbone(TINY_DEFAULT_SEED);
    let cases = [
        (1, None, vec![2u32, 4]),
        (3, None, vec![2, 25, 26, 4, 3]),
        (4, Some(vec![0]), vec![2, 30, 31, 32, 4, 3]),
        (2, Some(vec![1]), vec![2, 4, 3]),
    ];
    for (p, layers, ids) in cases {
        let pp = prefix(PrefixConfig { length: p, inject_layers: layers, ..Default::default() }, &b, 3, 25.0);
        let got = b.forward_with_prefix(&ids, &pp).unwrap();
        let want = reference_prefix_forward(b.net(), &ids, &slots(&pp, 2));
        assert_eq!(got.dim(), (ids.len(), 32));
        assert!(max_rel_err(&got, &want) < 1e-10, "p={p} ids={ids:?}");
    }
}

#[test]
fn empty_prefix_is_plain_forward_exactly() {
    let b = tiny_backbone(TINY_DEFAULT_SEED);
    let pp = PrefixParams::new(&PrefixConfig { length: 0, ..Default::default() }, &b, 0).unwrap();
    let ids = [2u32, 25, 33, 4, 3];
    assert_eq!(b.forward_with_prefix(&ids, &pp).unwrap(), b.forward_plain(&ids).unwrap());
}

#[test]
fn prefix_changes_token_states() {
    let b = tiny_backbone(TINY_DEFAULT_SEED);
    let ids = [2u32, 25, 4, 3];
    let pp = prefix(PrefixConfig { length: 2, ..Default::default() }, &b, 1, 25.0);
    assert_ne!(b.forward_with_prefix(&ids, &pp).unwrap(), b.forward_plain(&ids).unwrap());
}
