// Copyright 2026 The medbert authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Side-by-side comparison of two runs' per-dataset scores, with deltas and a mean row.
//! The inputs are the published BERT and MedicalBERT columns.

use std::path::Path;

use medbert::pipeline::compare_runs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table3.tsv");
    let text = std::fs::read_to_string(path)?;
    let (mut bert, mut ours) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        bert.push((f[0].to_string(), f[2].parse()?));
        ours.push((f[0].to_string(), f[3].parse()?));
    }
    let cmp = compare_runs(&[("BERT".into(), bert), ("MedicalBERT".into(), ours)])?;
    print!("{}", cmp.render(1));
    if let (Some(base), Some(delta)) = (cmp.means[0], cmp.mean_delta(1)) {
        println!("relative gain {:.2}%", 100.0 * delta / base);
    }
    Ok(())
}
