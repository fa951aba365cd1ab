// Regenerate fixtures through the primary pipeline before the suite runs.

import { execFileSync } from 'node:child_process';
import { fileURLToPath } from 'node:url';
import { dirname, join } from 'node:path';

export default function setup(): void {
  const here = dirname(fileURLToPath(import.meta.url));
  const script = join(here, '..', 'scripts', 'make_fixtures.py');
  execFileSync('python3', [script], { stdio: 'inherit' });
}
