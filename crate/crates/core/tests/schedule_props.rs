use nestar::schedule::{morton_rank, morton_unrank, raster_rank, raster_unrank};
use nestar::{Ordering, PatchId, ScheduleSpec};
use proptest::prelude::*;

fn schedule(k: usize, m: usize) -> ScheduleSpec {
    let ordering = if k == 4 {
        Ordering::Morton
    } else {
        Ordering::Raster
    };
    ScheduleSpec::new(k, m, 1, ordering).unwrap()
}

fn small_schedule() -> impl Strategy<Value = ScheduleSpec> {
    (2usize..=5, 1usize..=4).prop_map(|(k, m)| schedule(k, m))
}

proptest! {
    #[test]
    fn generation_order_partitions_tokens(s in small_schedule()) {
        let mut next = 1;
        for p in s.generation_order() {
            let (a, b) = s.patch_range(p).unwrap();
            prop_assert_eq!(a, next);
            prop_assert_eq!(s.prefix_len(p).unwrap(), a - 1);
            next = b + 1;
        }
        prop_assert_eq!(next, s.n() + 1);
        prop_assert_eq!(s.generation_order().len(), s.eval_count(s.modules()).unwrap());
    }

    #[test]
    fn module_patches_tile_its_scope(s in small_schedule()) {
        let k = s.k();
        for m in 1..=s.modules() {
            let len = s.patch_tokens(m).unwrap();
            let mut next = 1;
            for i in 1..=k {
                let (a, b) = s.patch_range(PatchId::new(m, i)).unwrap();
                prop_assert_eq!((a, b - a + 1), (next, len));
                prop_assert_eq!(s.prefix_len(PatchId::new(m, i)).unwrap(), len * (i - 1));
                next = b + 1;
            }
            prop_assert_eq!(next - 1, s.scope_tokens(m).unwrap());
            if m > 1 {
                // the first patch of a module is the whole scope of the one below
                prop_assert_eq!(s.patch_range(PatchId::new(m, 1)).unwrap(), (1, s.scope_tokens(m - 1).unwrap()));
            }
        }
    }

    #[test]
    fn morton_round_trip(bits in 0u32..=6, seed in any::<u64>()) {
        let side = 1usize << bits;
        let index = (seed as usize) % (side * side);
        let (r, c) = morton_unrank(index, side).unwrap();
        prop_assert_eq!(morton_rank(r, c, side).unwrap(), index);
        let (r, c) = raster_unrank(index, side).unwrap();
        prop_assert_eq!(raster_rank(r, c, side).unwrap(), index);
    }

    #[test]
    fn morton_prefixes_are_aligned_blocks(modules in 1usize..=4, level_seed in any::<usize>(), block_seed in any::<usize>()) {
        let s = schedule(4, modules);
        let level = level_seed % (modules + 1);
        let size = 1usize << level;
        let blocks = s.n() / (size * size);
        let b = block_seed % blocks;
        let cells: Vec<(usize, usize)> = (1..=size * size)
            .map(|j| s.token_cell(b * size * size + j).unwrap())
            .collect();
        let r0 = cells.iter().map(|c| c.0).min().unwrap();
        let c0 = cells.iter().map(|c| c.1).min().unwrap();
        prop_assert_eq!(r0 % size, 0);
        prop_assert_eq!(c0 % size, 0);
        for (r, c) in cells {
            prop_assert!(r < r0 + size && c < c0 + size);
        }
    }

    #[test]
    fn cell_token_inverts_token_cell(modules in 1usize..=4, idx in any::<usize>()) {
        let s = schedule(4, modules);
        let j = idx % s.n() + 1;
        let (r, c) = s.token_cell(j).unwrap();
        prop_assert_eq!(s.cell_token(r, c).unwrap(), j);
    }
}

#[test]
fn out_of_range_patches_are_rejected() {
    let s = schedule(4, 2);
    assert!(s.patch_range(PatchId::new(3, 1)).is_err());
    assert!(s.patch_range(PatchId::new(1, 5)).is_err());
    assert!(s.patch_range(PatchId::new(0, 1)).is_err());
    assert!(s.token_cell(0).is_err());
    assert!(s.token_cell(17).is_err());
}
