// heavier criteria (6-11); filled in below
