from setuptools import setup, find_packages

setup(
    name='ComplexPhase',
    version='0.1.0',
    packages=find_packages(exclude=['tests']),
    install_requires=['numpy', 'pandas', 'matplotlib', 'scipy', "tomli; python_version < '3.11'"],
    extras_require={'test': ['pytest']},
    include_package_data=True,
    description='Gray-box identification of grid-forming inverters in complex-phase normal form.',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    license='MIT License',
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
    ],
    entry_points={'console_scripts': ['complexphase = complexphase.cli:main']},
    python_requires='>=3.10',
)
