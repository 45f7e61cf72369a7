use std::collections::BTreeSet;

use ens_core::propcheck::Property;
use ens_core::scenarios;
use ens_core::worldmodel::{Actor, EventKind};

#[test]
fn scenario_traces_are_well_formed_and_replayable() {
    for s in scenarios::all() {
        let a = s.run(9).unwrap();
        let b = s.run(9).unwrap();
        assert!(a.trace.validate().is_ok(), "{}", s.id);
        assert_eq!(a.trace, b.trace, "{} not replayable", s.id);
    }
}

#[test]
fn honest_broadcasts_follow_presence() {
    for s in scenarios::all() {
        let t = s.run(5).unwrap().trace;
        let mut present = BTreeSet::new();
        for e in &t {
            match e.kind {
                EventKind::IsAt { phone, place } => {
                    present.insert((phone, place, e.epoch));
                }
                EventKind::BleWrite {
                    actor: Actor::Phone(p),
                    place,
                    ..
                }
                | EventKind::BleRead {
                    actor: Actor::Phone(p),
                    place,
                    ..
                } => assert!(present.contains(&(p, place, e.epoch)), "{}: seq {}", s.id, e.seq),
                _ => {}
            }
        }
    }
}

#[test]
fn all_properties_are_exercised() {
    let mut seen = BTreeSet::new();
    for s in scenarios::all() {
        for v in s.run(42).unwrap().violations {
            seen.insert(v.property);
        }
    }
    for p in [Property::Soundness, Property::UploadAuthGaen, Property::UploadAuthRobert] {
        assert!(seen.contains(&p), "{p:?}");
    }
}

#[test]
fn seeds_change_key_material_not_verdicts() {
    let a = scenarios::run("honest.dp3t", 1).unwrap();
    let b = scenarios::run("honest.dp3t", 2).unwrap();
    assert_ne!(a.trace, b.trace);
    assert_eq!(a.patterns(), b.patterns());
    assert_eq!(a.alarmed, b.alarmed);
}
