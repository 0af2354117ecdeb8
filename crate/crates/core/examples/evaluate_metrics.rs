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

//! The scoring functions on small hand-checkable inputs.

use medbert::metrics::{classification_scores, cosine, entity_f1, multilabel_scores, pearson, Span};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // One correct span, one missed, one spurious: P = R = F1 = 0.5.
    let gold = vec![vec![Span::new(1, 2, "Disease"), Span::new(5, 6, "Disease")]];
    let pred = vec![vec![Span::new(1, 2, "Disease"), Span::new(7, 8, "Disease")]];
    let report = entity_f1(&gold, &pred)?;
    print!("entity-level\n{}", report.render());

    let gold = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
    let pred = [0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 0, 0];
    print!("\nthree-class\n{}", classification_scores(&gold, &pred, 3)?.render());

    let gold = vec![vec![true, false, true], vec![false, false, false]];
    let pred = vec![vec![true, true, true], vec![false, false, false]];
    print!("\nmultilabel\n{}", multilabel_scores(&gold, &pred)?.render());

    println!("\npearson {:.5}", pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])?);
    println!("cosine  {:.5}", cosine(&[1.0, 1.0], &[1.0, 0.0])?);
    Ok(())
}
